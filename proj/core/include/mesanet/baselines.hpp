#pragma once

// Linear recurrent baselines and causal softmax attention.
//
//   Mamba2          G_t = gamma_t G_{t-1} + v_t k_t^T
//   GLA             G_t = gamma_t G_{t-1} + beta_t v_t k_t^T
//   DeltaNet        G_t = G_{t-1} (I - beta_t k_t k_t^T) + beta_t v_t k_t^T
//   Gated DeltaNet  G_t = gamma_t G_{t-1} (I - beta_t k_t k_t^T) + beta_t v_t k_t^T
//   mLSTM           as GLA, z_t = gamma_t z_{t-1} + beta_t k_t,
//                   o_t = G_t q_t / max(1, |z_t^T q_t|)
//
// All other readouts are o_t = G_t q_t.

#include <optional>
#include <string_view>
#include <vector>

#include "mesanet/linalg.hpp"
#include "mesanet/mesa.hpp"

namespace mesanet {

struct LinearAttnState {
  Mat G;
  std::optional<Vec> z;

  static LinearAttnState zeros(Eigen::Index n_v, Eigen::Index n_a, bool with_normalizer = false);
};

struct BaselineStep {
  LinearAttnState state;
  Vec o;
};

BaselineStep gla_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double beta, double gamma);
BaselineStep mamba2_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double gamma);
BaselineStep deltanet_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double beta);
BaselineStep gated_deltanet_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double beta,
                                 double gamma);
BaselineStep mlstm_step(const LinearAttnState& s, const Vec& k, const Vec& v, const Vec& q, double beta, double gamma);

// o = sum_{t'} v_t' softmax(K^T q)_t' over the columns of K and V.
Vec softmax_attention(const Mat& K, const Mat& V, const Vec& q);

// Deviation between one descent step on -v^T Phi k + (1-gamma)/(2 beta) tr(Phi Phi^T)
// and the GLA update. Requires beta > 0.
double gla_gradient_step_check(const Mat& phi, const Vec& k, const Vec& v, double beta, double gamma);
// Deviation between Phi - beta grad 1/2 ||v - Phi k||^2 and the DeltaNet update.
double deltanet_gradient_step_check(const Mat& phi, const Vec& k, const Vec& v, double beta);

enum class Recurrence { gla, mamba2, deltanet, gated_deltanet, mlstm };

std::string_view to_string(Recurrence r);

struct RecurrentForward {
  Mat O;
  std::vector<LinearAttnState> before;  // state entering each step
  LinearAttnState final_state;
};

struct RecurrentGrads {
  Mat dK, dV, dQ;
  Vec dbeta, dgamma;
};

// Gates that a recurrence does not use (beta for Mamba2, gamma for DeltaNet)
// are read as 1 and receive zero gradient.
RecurrentForward recurrent_forward(Recurrence kind, const MesaSequence& seq);
RecurrentGrads recurrent_backward(Recurrence kind, const MesaSequence& seq, const RecurrentForward& fwd, const Mat& E);

Mat softmax_forward(const Mat& K, const Mat& V, const Mat& Q);
struct SoftmaxGrads {
  Mat dK, dV, dQ;
};
SoftmaxGrads softmax_backward(const Mat& K, const Mat& V, const Mat& Q, const Mat& E);

}  // namespace mesanet
