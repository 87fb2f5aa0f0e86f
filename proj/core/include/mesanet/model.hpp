#pragma once

// Decoder-only residual stack with tied embeddings:
//
//   x    = sqrt(n_e) * Emb[tokens]
//   x   += Mixer(RMSNorm(x))        per block
//   x   += W_down(SiLU(W_gate h) * (W_up h)),  h = RMSNorm(x)
//   logits = 30 tanh(RMSNorm(x) Emb^T / 30)

#include <cstddef>
#include <string>
#include <vector>

#include "mesanet/mixer.hpp"
#include "mesanet/params.hpp"
#include "mesanet/rng.hpp"
#include "mesanet/tape.hpp"

namespace mesanet {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t n_e = 32;
  std::size_t n_heads = 2;
  std::size_t n_a = 16;
  std::size_t vocab = 2;
  MixerKind mixer = MixerKind::mesa;
  GateMode mode = GateMode::standard;
  int chunk = 16;
  CgOptions cg{1e-6, 30, CgInit::diagonal};
  double gate_bias = 3.0;

  MixerConfig mixer_config() const;
  void validate() const;
};

std::string block_prefix(std::size_t layer);

ParameterSet init_model_params(const ModelConfig& cfg, Rng& rng);
std::size_t model_param_count(const ModelConfig& cfg);

struct ForwardTrace {
  MixerTrace cg;
  std::vector<MixerInternals> layers;  // filled when collect_internals is set
  bool collect_internals = false;
};

// x is (batch * seq_len) x n_e.
NodeId block_forward(Tape& tape, const BoundParams& p, const ModelConfig& cfg, std::size_t layer, NodeId x,
                     std::size_t seq_len, ForwardTrace* trace = nullptr);

// tokens hold batch sequences of seq_len ids back to back. Returns logits of
// shape (batch * seq_len) x vocab.
NodeId model_forward(Tape& tape, const BoundParams& p, const ModelConfig& cfg, const std::vector<int>& tokens,
                     std::size_t seq_len, ForwardTrace* trace = nullptr);

Mat model_logits(const ModelConfig& cfg, const ParameterSet& params, const std::vector<int>& tokens,
                 std::size_t seq_len, ForwardTrace* trace = nullptr);

}  // namespace mesanet
