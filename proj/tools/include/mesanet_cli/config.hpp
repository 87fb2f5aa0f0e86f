#pragma once

// Run configuration files: UTF-8 lines of `key = value`, `#` starts a
// comment, blank lines ignored. Unknown keys are errors.
//
// Model:  n_layers n_e n_heads n_a mixer mode chunk cg_eps cg_max_iters cg_init gate_bias
// Train:  lr warmup steps final_lr_fraction weight_decay beta1 beta2 adam_eps
//         clip_norm batch seed eval_interval skip_first_token_loss wall_time_in_metrics
// Task:   task seq_len n_pairs eval_batch eval_len

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mesanet/model.hpp"
#include "mesanet/trainer.hpp"

namespace mesanet::cli {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message) : std::runtime_error(message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  // Sets one key from its textual value.
  void set(const std::string& key, const std::string& value);
  // Derives the vocabulary from the task and validates everything.
  void finalize();
  // key = value for every key, in documentation order.
  std::vector<std::pair<std::string, std::string>> entries() const;
};

const std::vector<std::string>& config_keys();

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace mesanet::cli
