#pragma once

// Multi-head sequence mixers with a shared feature pipeline:
//
//   q, k, v = SiLU(conv4(W x)), with q and k L2-normalized per head
//   beta    = sigmoid(W_beta x + b_beta)
//   gamma   = sigmoid(W_gamma x + b_gamma) * (1 - (1 - gamma_cap) beta^2)   (standard)
//           = 2 sigmoid(W_gamma x + b_gamma) - 1                            (state tracking)
//           = sigmoid(W_gamma x + b_gamma)                                  (high lambda)
//   Lambda  = lambda_floor + softplus(lambda_raw)                           (Mesa only)
//   out     = W_o RMSNorm_h(mix(q, k, v, beta, gamma, Lambda))
//
// Activations are (batch * T) x width with each sequence contiguous.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mesanet/baselines.hpp"
#include "mesanet/cg.hpp"
#include "mesanet/params.hpp"
#include "mesanet/rng.hpp"
#include "mesanet/tape.hpp"

namespace mesanet {

enum class MixerKind { mesa, gla, mamba2, deltanet, gated_deltanet, mlstm, softmax };
// state_tracking: gamma in (-1, 1) with Lambda >= 49.
// high_lambda:    gamma in (0, 1) with Lambda >= 49 (the positive-gate control).
enum class GateMode { standard, state_tracking, high_lambda };

std::string_view to_string(MixerKind k);
std::string_view to_string(GateMode m);
MixerKind parse_mixer_kind(std::string_view s);
GateMode parse_gate_mode(std::string_view s);

bool mixer_uses_beta(MixerKind k);
bool mixer_uses_gamma(MixerKind k);
bool mixer_uses_lambda(MixerKind k);
std::optional<Recurrence> as_recurrence(MixerKind k);

inline constexpr double kGammaCap = 0.9975;
inline constexpr double kLambdaFloorStandard = 0.25;
inline constexpr double kLambdaFloorStateTracking = 49.0;

struct MixerConfig {
  std::size_t n_e = 32;
  std::size_t n_heads = 2;
  std::size_t n_a = 16;
  MixerKind kind = MixerKind::mesa;
  GateMode mode = GateMode::standard;
  int chunk = 16;
  CgOptions cg{1e-6, 30, CgInit::diagonal};
  double gate_bias = 3.0;

  std::size_t width() const { return n_heads * n_a; }
  double lambda_floor() const {
    return mode == GateMode::standard ? kLambdaFloorStandard : kLambdaFloorStateTracking;
  }
  void validate() const;
};

// Adds the mixer's parameters under `prefix`. out_std scales the output
// projection initialization.
void init_mixer_params(ParameterSet& params, const std::string& prefix, const MixerConfig& cfg, Rng& rng,
                       double out_std);

std::size_t mixer_param_count(const MixerConfig& cfg);

struct MixerTrace {
  long long cg_iterations = 0;
  long long cg_solves = 0;
  double mean_iterations() const {
    return cg_solves ? static_cast<double>(cg_iterations) / static_cast<double>(cg_solves) : 0.0;
  }
};

// Realized gate and feature values of one mixer call, for inspection.
struct MixerInternals {
  Tensor q, k, v, beta, gamma, lambda, mixed;
};

NodeId mixer_forward(Tape& tape, const BoundParams& p, const std::string& prefix, const MixerConfig& cfg, NodeId x,
                     std::size_t seq_len, MixerTrace* trace = nullptr, MixerInternals* internals = nullptr);

// Tape-free convenience: x is (batch * seq_len) x n_e.
Mat mixer_forward_eval(const ParameterSet& params, const std::string& prefix, const MixerConfig& cfg, const Mat& x,
                       std::size_t seq_len, MixerTrace* trace = nullptr, MixerInternals* internals = nullptr);

// The multi-head sequence kernel as a single tape node. beta, gamma: rows x
// heads; lambda: heads x n_a (ignored unless Mesa).
NodeId sequence_mix(Tape& tape, const MixerConfig& cfg, NodeId q, NodeId k, NodeId v, NodeId beta, NodeId gamma,
                    NodeId lambda, std::size_t seq_len, MixerTrace* trace);

}  // namespace mesanet
