#pragma once

// Single-head Mesa kernels. Sequences are stored column-per-timestep:
// K, Q are n_a x T, V is n_v x T, and beta/gamma have length T.
//
//   G_t = gamma_t G_{t-1} + beta_t v_t k_t^T
//   H_t = gamma_t H_{t-1} + beta_t k_t k_t^T
//   o_t = G_t (H_t + Lambda)^{-1} q_t
//
// The input gate is absorbed symmetrically (k~ = sqrt(beta) k, v~ = sqrt(beta) v)
// inside the chunked kernels; gradients are still reported per raw beta.

#include <vector>

#include "mesanet/cg.hpp"
#include "mesanet/linalg.hpp"

namespace mesanet {

struct MesaState {
  Mat G;  // n_v x n_a
  Mat H;  // n_a x n_a

  static MesaState zeros(Eigen::Index n_v, Eigen::Index n_a) { return {Mat::Zero(n_v, n_a), Mat::Zero(n_a, n_a)}; }
};

struct GateSignals {
  double beta = 1.0;
  double gamma = 1.0;
};

struct MesaSequence {
  Mat K;
  Mat V;
  Mat Q;
  Vec beta;
  Vec gamma;

  Eigen::Index length() const { return K.cols(); }
  void validate(const Vec& lambda) const;
};

struct MesaStepResult {
  MesaState state;
  Vec o;
  Vec qstar;
  CgReport report;
};

MesaStepResult mesa_step(const MesaState& state, const Vec& k, const Vec& v, const Vec& q, GateSignals gates,
                         const Vec& lambda, const CgOptions& opts);

// T calls to mesa_step from the zero state; columns of the result are o_t.
struct MesaSequentialResult {
  Mat O;
  std::vector<CgReport> reports;
  MesaState final_state;
};
MesaSequentialResult mesa_forward_sequential(const MesaSequence& seq, const Vec& lambda, const CgOptions& opts);

// Optimal linear map for the discounted ridge objective after the last
// column of K/V, by dense solve.
Mat closed_form_phi(const Mat& K, const Mat& V, const Vec& beta, const Vec& gamma, const Vec& lambda);

// 1/2 sum_t' zeta_{T,t'} beta_t' ||v_t' - Phi k_t'||^2 + 1/2 tr(Phi Lambda Phi^T)
double mesa_objective(const Mat& phi, const Mat& K, const Mat& V, const Vec& beta, const Vec& gamma,
                      const Vec& lambda);
Mat mesa_objective_gradient(const Mat& phi, const Mat& K, const Mat& V, const Vec& beta, const Vec& gamma,
                            const Vec& lambda);

struct MesaForward {
  Mat O;      // n_v x T
  Mat Qstar;  // n_a x T, solutions of (H_t + Lambda) x = q_t
  std::vector<CgReport> reports;
  std::vector<MesaState> boundaries;  // state entering each chunk
  MesaState final_state;
  int chunk = 0;
};

MesaForward mesa_forward_chunked(const MesaSequence& seq, const Vec& lambda, int chunk, const CgOptions& opts);

struct MesaGrads {
  Mat dK, dV, dQ;
  Vec dbeta, dgamma, dlambda;
  std::vector<CgReport> reports;
};

// Gradients of sum_t e_t^T o_t, where E holds e_t column-wise.
MesaGrads mesa_backward_chunked(const MesaSequence& seq, const Vec& lambda, const MesaForward& fwd, const Mat& E,
                                const CgOptions& opts);

// Recursive least squares without forgetting: (R + k k^T)^{-1} from R^{-1}.
Mat sherman_morrison_step(const Mat& rinv, const Vec& k);

// Max |Phi_t - Phi_t'| between the direct map G_t (H_t + Lambda)^{-1} and the
// Newton-step form Phi_{t-1} - (Phi_{t-1} k_t - v_t) k_t^T (H_t + Lambda)^{-1},
// with unit gates, at step t (1-based).
double newton_identity_check(const Mat& K, const Mat& V, const Vec& lambda, int t);

}  // namespace mesanet
