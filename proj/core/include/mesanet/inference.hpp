#pragma once

// Recurrent decoding: one token at a time with per-head states and a 3-step
// convolution tail per stream, so memory does not grow with position (the
// softmax mixer, which keeps its keys and values, is the exception).

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "mesanet/baselines.hpp"
#include "mesanet/mesa.hpp"
#include "mesanet/model.hpp"
#include "mesanet/params.hpp"
#include "mesanet/rng.hpp"
#include "mesanet/tasks.hpp"

namespace mesanet {

struct HeadReport {
  std::size_t layer = 0;
  std::size_t head = 0;
  CgReport cg;
  double gamma = 1.0;
};

struct DecodeOutput {
  Vec logits;
  std::vector<HeadReport> heads;  // layer-major
};

class DecodeSession {
 public:
  // decode_cg replaces the model's CG options during decoding.
  DecodeSession(ModelConfig cfg, const ParameterSet& params, CgOptions decode_cg);

  DecodeOutput step(int token);

  std::size_t position() const { return position_; }
  const ModelConfig& config() const { return cfg_; }
  // Bytes held by recurrent states and convolution tails.
  std::size_t state_bytes() const;
  // H_t + Lambda operator of one Mesa head after the latest step.
  SpdOperator mesa_operator(std::size_t layer, std::size_t head) const;

 private:
  struct Head {
    MesaState mesa;
    LinearAttnState linear;
    std::vector<Vec> keys, values;
  };
  struct Layer {
    std::vector<Head> heads;
    Mat tail_q, tail_k, tail_v;  // 3 x width, row i = input at lag i + 1
    Mat lambda;                  // heads x n_a
  };

  Vec mixer_step(std::size_t l, const Vec& h, std::vector<HeadReport>& reports);

  ModelConfig cfg_;
  ParameterSet params_;
  std::vector<Layer> layers_;
  std::size_t position_ = 0;
};

// Decodes each sequence of the batch from a fresh session, returning logits
// stacked as (batch * seq_len) x vocab.
Mat decode_logits(const ModelConfig& cfg, const ParameterSet& params, const std::vector<int>& tokens,
                  std::size_t seq_len, const CgOptions& decode_cg, std::vector<HeadReport>* reports = nullptr);

struct HeadStats {
  std::size_t layer = 0;
  std::size_t head = 0;
  long long steps = 0;
  long long total_iterations = 0;
  int max_iterations = 0;
  double gamma_sum = 0.0;
  std::vector<long long> iteration_histogram;  // index = iterations used
  struct Sample {
    std::size_t position;
    int cg_iters;
    double condition;
    double gamma_mean;
  };
  std::vector<Sample> samples;

  double mean_iterations() const { return steps ? static_cast<double>(total_iterations) / steps : 0.0; }
  double mean_gamma() const { return steps ? gamma_sum / static_cast<double>(steps) : 0.0; }
  void record(const HeadReport& r);
};

struct SweepRow {
  double eps = 0.0;
  int max_iters = 0;
  double mean_iterations = 0.0;
  double accuracy = 0.0;
  long long solves = 0;
  std::vector<HeadStats> heads;
};

struct StopSetting {
  double eps;
  int max_iters;
};

std::vector<StopSetting> default_stop_grid();

// Decodes every sequence of the evaluation batch once per setting.
std::vector<SweepRow> sweep_stopping(const ModelConfig& cfg, const ParameterSet& params,
                                     const std::vector<StopSetting>& grid, const Batch& eval);

inline constexpr std::size_t kConditionStride = 16;

// Condition estimates of every Mesa head at positions 0, 16, 32, ...
std::vector<HeadStats> head_condition_profile(const ModelConfig& cfg, const ParameterSet& params,
                                              const std::vector<int>& sequence, const CgOptions& decode_cg, Rng& rng);

// Columns: layer, head, position, cg_iters, cond_estimate, gamma_mean.
void write_stats_csv(std::ostream& out, const std::vector<HeadStats>& stats);

}  // namespace mesanet
