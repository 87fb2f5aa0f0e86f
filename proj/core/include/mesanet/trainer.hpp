#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "mesanet/model.hpp"
#include "mesanet/params.hpp"
#include "mesanet/tasks.hpp"

namespace mesanet {

enum class TaskKind { parity, recall };
std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);

struct TaskSpec {
  TaskKind kind = TaskKind::parity;
  std::size_t seq_len = 40;  // parity training length
  std::size_t n_pairs = 8;   // recall
  std::size_t eval_batch = 256;
  std::size_t eval_len = 40;  // parity evaluation length
};

struct TrainConfig {
  double lr = 1e-3;
  int warmup = 100;
  int steps = 1000;
  double final_lr_fraction = 0.1;
  double weight_decay = 0.03;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  int eval_interval = 100;
  bool skip_first_token_loss = false;
  bool wall_time_in_metrics = false;
  TaskSpec task;

  void validate() const;
};

inline constexpr double kWarmupStartLr = 1e-6;

// Linear warmup from kWarmupStartLr to lr, then cosine decay to
// final_lr_fraction * lr at `steps`.
double cosine_lr(int step, const TrainConfig& cfg);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long long step = 0;
};

// Decoupled weight decay; parameters flagged decay=false are not decayed.
void adamw_step(ParameterSet& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
                const TrainConfig& cfg);

// Scales grads in place so their joint norm is at most max_norm; returns the
// norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

struct MetricsRecord {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double task_accuracy = 0.0;
  double mean_cg_iters = 0.0;
  double wall_ms = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  double mean_cg_iters = 0.0;
};

Batch make_task_batch(const TaskSpec& task, std::size_t vocab, std::size_t batch, std::size_t len, Rng& rng);
std::size_t task_vocab(const TaskSpec& task, std::size_t n_a_hint);

// Teacher-forced loss and argmax accuracy over the masked positions.
EvalResult evaluate(const ModelConfig& model, const ParameterSet& params, const Batch& batch,
                    std::size_t max_rows_per_pass = 4096);

struct TrainResult {
  ParameterSet params;  // last finite parameters
  std::vector<MetricsRecord> metrics;
  std::vector<double> wall_ms;  // measured times, kept out of metrics unless requested
  bool aborted = false;
  std::string abort_reason;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const MetricsSink& sink = {},
                  const ParameterSet* initial = nullptr);

}  // namespace mesanet
