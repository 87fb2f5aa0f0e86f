#include "mesanet/mesa.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mesanet {

void MesaSequence::validate(const Vec& lambda) const {
  const Eigen::Index t = K.cols();
  if (V.cols() != t || Q.cols() != t || beta.size() != t || gamma.size() != t) {
    throw ShapeError("mesa: keys, values, queries and gates must share the sequence length");
  }
  if (Q.rows() != K.rows() || lambda.size() != K.rows()) throw ShapeError("mesa: key/query/regularizer size mismatch");
  if (!K.allFinite() || !V.allFinite() || !Q.allFinite() || !beta.allFinite() || !gamma.allFinite()) {
    throw NumericError("mesa: non-finite inputs");
  }
  if ((beta.array() < 0.0).any()) throw std::invalid_argument("mesa: input gate must be non-negative");
  if ((lambda.array() <= 0.0).any()) throw std::invalid_argument("mesa: regularizer must be positive");
}

MesaStepResult mesa_step(const MesaState& state, const Vec& k, const Vec& v, const Vec& q, GateSignals gates,
                         const Vec& lambda, const CgOptions& opts) {
  if (gates.beta < 0) throw std::invalid_argument("mesa_step: input gate must be non-negative");
  SpdOperator op{state.H, lambda, gates.gamma, Vec(std::sqrt(gates.beta) * k)};
  CgResult sol = cg_solve(op, q, opts);

  MesaStepResult out;
  out.state.G = gates.gamma * state.G + gates.beta * v * k.transpose();
  out.state.H = gates.gamma * state.H + gates.beta * k * k.transpose();
  out.o = out.state.G * sol.x;
  out.qstar = std::move(sol.x);
  out.report = sol.report;
  return out;
}

MesaSequentialResult mesa_forward_sequential(const MesaSequence& seq, const Vec& lambda, const CgOptions& opts) {
  seq.validate(lambda);
  MesaSequentialResult out;
  out.final_state = MesaState::zeros(seq.V.rows(), seq.K.rows());
  out.O.resize(seq.V.rows(), seq.length());
  for (Eigen::Index t = 0; t < seq.length(); ++t) {
    MesaStepResult step;
    try {
      step = mesa_step(out.final_state, seq.K.col(t), seq.V.col(t), seq.Q.col(t), {seq.beta[t], seq.gamma[t]},
                       lambda, opts);
    } catch (const NotPositiveDefinite& e) {
      throw NotPositiveDefinite(std::string(e.what()) + " at t=" + std::to_string(t));
    }
    out.O.col(t) = step.o;
    out.reports.push_back(step.report);
    out.final_state = std::move(step.state);
  }
  return out;
}

namespace {

// zeta_{T-1, t'} * beta_t' for every t'.
Vec discounted_weights(const Vec& beta, const Vec& gamma) {
  const Eigen::Index n = beta.size();
  Vec w(n);
  double z = 1.0;
  for (Eigen::Index t = n; t-- > 0;) {
    w[t] = z * beta[t];
    z *= gamma[t];
  }
  return w;
}

void check_objective_shapes(const Mat& K, const Mat& V, const Vec& beta, const Vec& gamma, const Vec& lambda) {
  if (K.cols() < 1) throw ShapeError("mesa objective: need at least one step");
  if (V.cols() != K.cols() || beta.size() != K.cols() || gamma.size() != K.cols() || lambda.size() != K.rows()) {
    throw ShapeError("mesa objective: inconsistent shapes");
  }
}

}  // namespace

Mat closed_form_phi(const Mat& K, const Mat& V, const Vec& beta, const Vec& gamma, const Vec& lambda) {
  check_objective_shapes(K, V, beta, gamma, lambda);
  const Vec w = discounted_weights(beta, gamma);
  const Mat G = V * w.asDiagonal() * K.transpose();
  Mat H = K * w.asDiagonal() * K.transpose();
  H.diagonal() += lambda;
  Eigen::FullPivLU<Mat> lu(H);
  if (!lu.isInvertible()) throw NumericError("closed_form_phi: singular regularized system");
  return lu.solve(G.transpose()).transpose();
}

double mesa_objective(const Mat& phi, const Mat& K, const Mat& V, const Vec& beta, const Vec& gamma,
                      const Vec& lambda) {
  check_objective_shapes(K, V, beta, gamma, lambda);
  if (phi.rows() != V.rows() || phi.cols() != K.rows()) throw ShapeError("mesa_objective: Phi has wrong shape");
  const Vec w = discounted_weights(beta, gamma);
  const Mat resid = V - phi * K;
  double loss = 0.5 * (resid.colwise().squaredNorm().transpose().array() * w.array()).sum();
  loss += 0.5 * (phi.array().square().rowwise() * lambda.transpose().array()).sum();
  return loss;
}

Mat mesa_objective_gradient(const Mat& phi, const Mat& K, const Mat& V, const Vec& beta, const Vec& gamma,
                            const Vec& lambda) {
  check_objective_shapes(K, V, beta, gamma, lambda);
  const Vec w = discounted_weights(beta, gamma);
  return -(V - phi * K) * w.asDiagonal() * K.transpose() + phi * lambda.asDiagonal();
}

namespace {

struct ChunkView {
  Eigen::Index begin;
  Eigen::Index size;
  Mat k_tilde;
  Mat v_tilde;
  DecayChunk decay;
};

ChunkView make_chunk(const MesaSequence& seq, Eigen::Index begin, Eigen::Index size) {
  const Vec root = seq.beta.segment(begin, size).cwiseSqrt();
  return {begin, size, seq.K.middleCols(begin, size) * root.asDiagonal(),
          seq.V.middleCols(begin, size) * root.asDiagonal(), DecayChunk::from_gates(seq.gamma.segment(begin, size))};
}

CgChunkResult solve_located(const Mat& h, const ChunkView& c, const Vec& lambda, const Mat& rhs,
                            const CgOptions& opts) {
  try {
    return cg_solve_chunk(h, c.k_tilde, c.decay, lambda, rhs, opts);
  } catch (const NotPositiveDefinite& e) {
    throw NotPositiveDefinite(std::string(e.what()) + " in chunk starting at t=" + std::to_string(c.begin));
  }
}

}  // namespace

MesaForward mesa_forward_chunked(const MesaSequence& seq, const Vec& lambda, int chunk, const CgOptions& opts) {
  seq.validate(lambda);
  if (chunk < 1) throw std::invalid_argument("mesa_forward_chunked: chunk size must be >= 1");
  const Eigen::Index T = seq.length();
  const Eigen::Index n_a = seq.K.rows(), n_v = seq.V.rows();

  MesaForward out;
  out.chunk = chunk;
  out.O.resize(n_v, T);
  out.Qstar.resize(n_a, T);
  out.reports.reserve(static_cast<std::size_t>(T));
  MesaState state = MesaState::zeros(n_v, n_a);

  for (Eigen::Index c0 = 0; c0 < T; c0 += chunk) {
    const ChunkView c = make_chunk(seq, c0, std::min<Eigen::Index>(chunk, T - c0));
    const Mat& Z = c.decay.within;
    const Vec& g = c.decay.boundary;

    CgChunkResult sol = solve_located(state.H, c, lambda, seq.Q.middleCols(c0, c.size), opts);
    out.O.middleCols(c0, c.size) =
        (state.G * sol.x) * g.asDiagonal() + c.v_tilde * Z.cwiseProduct(c.k_tilde.transpose() * sol.x);
    out.Qstar.middleCols(c0, c.size) = sol.x;
    out.reports.insert(out.reports.end(), sol.reports.begin(), sol.reports.end());
    out.boundaries.push_back(state);

    const Vec tail = Z.col(c.size - 1);
    const double g_last = g[c.size - 1];
    state.G = g_last * state.G + c.v_tilde * tail.asDiagonal() * c.k_tilde.transpose();
    Mat h = g_last * state.H + c.k_tilde * tail.asDiagonal() * c.k_tilde.transpose();
    state.H = 0.5 * (h + h.transpose());
  }
  out.final_state = std::move(state);
  return out;
}

MesaGrads mesa_backward_chunked(const MesaSequence& seq, const Vec& lambda, const MesaForward& fwd, const Mat& E,
                                const CgOptions& opts) {
  seq.validate(lambda);
  const Eigen::Index T = seq.length();
  const Eigen::Index n_a = seq.K.rows(), n_v = seq.V.rows();
  if (E.rows() != n_v || E.cols() != T) throw ShapeError("mesa_backward_chunked: upstream error has wrong shape");
  if (fwd.O.cols() != T || fwd.chunk < 1) throw std::invalid_argument("mesa_backward_chunked: forward does not match");

  MesaGrads gr;
  gr.dK = Mat::Zero(n_a, T);
  gr.dV = Mat::Zero(n_v, T);
  gr.dQ = Mat::Zero(n_a, T);
  gr.dbeta = Vec::Zero(T);
  gr.dgamma = Vec::Zero(T);
  gr.dlambda = Vec::Zero(n_a);
  gr.reports.resize(static_cast<std::size_t>(T));

  // R = sum_{t > chunk end} zeta e_t q*_t^T and S likewise with e*_t.
  Mat R = Mat::Zero(n_v, n_a);
  Mat S = Mat::Zero(n_a, n_a);

  const auto chunks = static_cast<Eigen::Index>(fwd.boundaries.size());
  for (Eigen::Index ci = chunks; ci-- > 0;) {
    const Eigen::Index c0 = ci * fwd.chunk;
    const Eigen::Index n = std::min<Eigen::Index>(fwd.chunk, T - c0);
    const ChunkView c = make_chunk(seq, c0, n);
    const MesaState& boundary = fwd.boundaries[static_cast<std::size_t>(ci)];
    const Mat& Gc = boundary.G;
    const Mat& Hc = boundary.H;
    const Mat& Z = c.decay.within;
    const Vec& g = c.decay.boundary;

    const Mat Kc = seq.K.middleCols(c0, n);
    const Mat Vc = seq.V.middleCols(c0, n);
    const Vec b = seq.beta.segment(c0, n);
    const Mat Qs = fwd.Qstar.middleCols(c0, n);
    const Mat Ec = E.middleCols(c0, n);

    // e*_t = (H_t + Lambda)^{-1} G_t^T e_t
    const Mat rhs = (Gc.transpose() * Ec) * g.asDiagonal() + c.k_tilde * Z.cwiseProduct(c.v_tilde.transpose() * Ec);
    CgChunkResult sol = solve_located(Hc, c, lambda, rhs, opts);
    const Mat& Es = sol.x;
    std::copy(sol.reports.begin(), sol.reports.end(), gr.reports.begin() + c0);

    const Vec w = Z.col(n - 1);
    const Mat KQ = Kc.transpose() * Qs;
    const Mat VE = Vc.transpose() * Ec;
    const Mat KE = Kc.transpose() * Es;
    const Mat Mqk = Z.cwiseProduct(KQ);
    const Mat Mev = Z.cwiseProduct(VE);
    const Mat Mek = Z.cwiseProduct(KE);

    const Mat Fk = Ec * Mqk.transpose() + (R * Kc) * w.asDiagonal();
    const Mat Ftv = Qs * Mev.transpose() + (R.transpose() * Vc) * w.asDiagonal();
    const Mat Bk = Es * Mqk.transpose() + (S * Kc) * w.asDiagonal();
    const Mat Btk = Qs * Mek.transpose() + (S.transpose() * Kc) * w.asDiagonal();

    gr.dV.middleCols(c0, n) = Fk * b.asDiagonal();
    gr.dK.middleCols(c0, n) = (Ftv - Btk - Bk) * b.asDiagonal();
    gr.dbeta.segment(c0, n) =
        Vc.cwiseProduct(Fk).colwise().sum().transpose() - Kc.cwiseProduct(Bk).colwise().sum().transpose();
    gr.dQ.middleCols(c0, n) = Es;
    gr.dlambda -= Qs.cwiseProduct(Es).rowwise().sum();

    // d/dgamma_s = <R_s, G_{s-1}> - <S_s, H_{s-1}>, split into boundary,
    // carry and within-chunk interactions.
    Vec h(n);
    Mat Zprev = Mat::Zero(n, n);
    for (Eigen::Index s = 0; s < n; ++s) {
      h[s] = s == 0 ? 1.0 : g[s - 1];
      for (Eigen::Index m = 0; m < s; ++m) Zprev(s, m) = Z(m, s - 1);
    }
    const Vec p = Ec.cwiseProduct(Gc * Qs).colwise().sum().transpose() -
                  Es.cwiseProduct(Hc * Qs).colwise().sum().transpose();
    const Vec r = b.cwiseProduct(Vc.cwiseProduct(R * Kc).colwise().sum().transpose() -
                                 Kc.cwiseProduct(S * Kc).colwise().sum().transpose());
    const Mat W = b.asDiagonal() * (VE - KE).cwiseProduct(KQ);
    const double carry = (R.array() * Gc.array()).sum() - (S.array() * Hc.array()).sum();
    gr.dgamma.segment(c0, n) = carry * w.cwiseProduct(h) + h.cwiseProduct(Z * p) + w.cwiseProduct(Zprev * r) +
                               (Zprev * W).cwiseProduct(Z).rowwise().sum();

    const double g_last = g[n - 1];
    R = Ec * g.asDiagonal() * Qs.transpose() + g_last * R;
    S = Es * g.asDiagonal() * Qs.transpose() + g_last * S;
  }
  return gr;
}

Mat sherman_morrison_step(const Mat& rinv, const Vec& k) {
  if (rinv.rows() != rinv.cols() || rinv.rows() != k.size()) throw ShapeError("sherman_morrison_step: shape mismatch");
  const Vec u = rinv * k;
  const double denom = 1.0 + k.dot(u);
  if (!(denom > 0)) throw NumericError("sherman_morrison_step: non-positive denominator");
  Mat out = rinv - (u * u.transpose()) / denom;
  return 0.5 * (out + out.transpose());
}

double newton_identity_check(const Mat& K, const Mat& V, const Vec& lambda, int t) {
  if (t < 1 || t > K.cols()) throw std::invalid_argument("newton_identity_check: step outside sequence");
  if (V.cols() != K.cols() || lambda.size() != K.rows()) throw ShapeError("newton_identity_check: shape mismatch");
  const Eigen::Index n = t;
  auto accumulate = [&](Eigen::Index upto) {
    MesaState s = MesaState::zeros(V.rows(), K.rows());
    s.G = V.leftCols(upto) * K.leftCols(upto).transpose();
    s.H = K.leftCols(upto) * K.leftCols(upto).transpose();
    s.H.diagonal() += lambda;
    return s;
  };
  const MesaState prev = accumulate(n - 1);
  const MesaState cur = accumulate(n);
  Eigen::LDLT<Mat> prev_f(prev.H), cur_f(cur.H);

  const Mat phi_prev = prev_f.solve(prev.G.transpose()).transpose();
  const Mat direct = cur_f.solve(cur.G.transpose()).transpose();
  const Vec k = K.col(n - 1);
  const Vec v = V.col(n - 1);
  const Mat grad = (phi_prev * k - v) * k.transpose();
  const Mat newton = phi_prev - cur_f.solve(grad.transpose()).transpose();
  return (direct - newton).cwiseAbs().maxCoeff();
}

}  // namespace mesanet
