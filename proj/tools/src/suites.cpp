#include "mesanet_cli/suites.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mesanet/baselines.hpp"
#include "mesanet/cg.hpp"
#include "mesanet/mesa.hpp"
#include "mesanet/rng.hpp"

namespace mesanet::cli {

void SuiteResult::check(bool ok, const std::string& what, double deviation) {
  worst = std::max(worst, deviation);
  if (ok) {
    ++passed;
    return;
  }
  ++failed;
  if (failures.size() < 8) {
    std::ostringstream os;
    os << what << " (deviation " << deviation << ")";
    failures.push_back(os.str());
  }
}

namespace {

double rel_err(const Mat& a, const Mat& b) {
  const double den = std::max(b.norm(), 1e-300);
  return (a - b).norm() / den;
}

Vec uniform_vec(Rng& rng, Eigen::Index n, double lo, double hi) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

Mat unit_columns(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) m.col(j) = rng.unit_vec(rows);
  return m;
}

MesaSequence random_sequence(Rng& rng, Eigen::Index n_a, Eigen::Index n_v, Eigen::Index T, double gamma_lo) {
  MesaSequence s;
  s.K = unit_columns(rng, n_a, T);
  s.Q = unit_columns(rng, n_a, T);
  s.V = rng.normal_mat(n_v, T);
  s.beta = uniform_vec(rng, T, 0.05, 1.0);
  s.gamma = uniform_vec(rng, T, gamma_lo, 1.0);
  return s;
}

// gamma-discounted sum of unit-key rank-one terms plus diag(lambda).
SpdOperator random_operator(Rng& rng, Eigen::Index n, double lambda_lo) {
  SpdOperator op;
  const Eigen::Index terms = 1 + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(3 * n)));
  op.base = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < terms; ++i) {
    const Vec k = rng.unit_vec(n);
    op.base = rng.uniform(0.5, 1.0) * op.base + rng.uniform(0.0, 1.0) * k * k.transpose();
  }
  op.lambda = uniform_vec(rng, n, lambda_lo, lambda_lo + 2.0);
  return op;
}

}  // namespace

SuiteResult run_cg_suite(std::uint64_t seed) {
  SuiteResult r("cg");
  Rng rng = Rng(seed).derive("verify.cg");
  const Eigen::Index dims[] = {4, 8, 16, 32};
  for (int i = 0; i < 200; ++i) {
    const Eigen::Index n = dims[i % 4];
    const SpdOperator op = random_operator(rng, n, 0.25);
    const Vec q = rng.normal_vec(n);
    const Vec direct = op.dense().ldlt().solve(q);

    const CgResult tight = cg_solve(op, q, {1e-10, 10 * static_cast<int>(n), CgInit::diagonal});
    const double e = rel_err(tight.x, direct);
    r.check(e <= 1e-8, "cg eps=1e-10 vs direct solve, n=" + std::to_string(n), e);

    const CgResult exact = cg_solve(op, q, {0.0, static_cast<int>(n), CgInit::diagonal});
    const double e0 = rel_err(exact.x, direct);
    r.check(exact.report.iterations <= n && e0 <= 1e-8, "cg eps=0 terminates in n steps, n=" + std::to_string(n), e0);
  }

  // Batched chunk solve agrees with per-step dense solves.
  for (int i = 0; i < 20; ++i) {
    const Eigen::Index n = dims[i % 4], C = 1 + static_cast<Eigen::Index>(rng.below(12));
    const Mat h0 = random_operator(rng, n, 0.25).base;
    const Mat keys = rng.normal_mat(n, C);
    const Vec gamma = uniform_vec(rng, C, 0.3, 1.0);
    const Vec lambda = uniform_vec(rng, n, 0.25, 1.0);
    const Mat rhs = rng.normal_mat(n, C);
    const DecayChunk decay = DecayChunk::from_gates(gamma);
    const CgChunkResult res = cg_solve_chunk(h0, keys, decay, lambda, rhs, {1e-12, 20 * static_cast<int>(n)});
    Mat H = h0;
    double worst = 0.0;
    for (Eigen::Index t = 0; t < C; ++t) {
      H = gamma(t) * H + keys.col(t) * keys.col(t).transpose();
      Mat A = H;
      A.diagonal() += lambda;
      worst = std::max(worst, rel_err(res.x.col(t), A.ldlt().solve(rhs.col(t))));
    }
    r.check(worst <= 1e-8, "chunk solve vs dense, C=" + std::to_string(C), worst);
  }

  // A zero right-hand side converges immediately.
  const SpdOperator op = random_operator(rng, 8, 0.25);
  const CgResult zero = cg_solve(op, Vec::Zero(8), {});
  r.check(zero.report.iterations == 0 && zero.x.isZero(0.0), "zero rhs");

  // Indefinite operators are rejected.
  SpdOperator bad = op;
  bad.lambda.setConstant(-100.0);
  bool threw = false;
  try {
    cg_solve(bad, rng.normal_vec(8), {1e-10, 50});
  } catch (const NotPositiveDefinite&) {
    threw = true;
  }
  r.check(threw, "indefinite operator raises NotPositiveDefinite");
  return r;
}

SuiteResult run_mesa_suite(std::uint64_t seed) {
  SuiteResult r("mesa");
  Rng rng = Rng(seed).derive("verify.mesa");
  const CgOptions tight{1e-12, 200, CgInit::diagonal};

  for (int i = 0; i < 50; ++i) {
    const Eigen::Index n_a = 2 + static_cast<Eigen::Index>(rng.below(15));
    const Eigen::Index n_v = 2 + static_cast<Eigen::Index>(rng.below(15));
    const Eigen::Index T = 1 + static_cast<Eigen::Index>(rng.below(128));
    const MesaSequence seq = random_sequence(rng, n_a, n_v, T, 0.3);
    const Vec lambda = uniform_vec(rng, n_a, 0.25, 2.0);
    const MesaSequentialResult ref = mesa_forward_sequential(seq, lambda, tight);
    for (int C : {1, 4, 16, static_cast<int>(T)}) {
      const MesaForward f = mesa_forward_chunked(seq, lambda, C, tight);
      const double dev = (f.O - ref.O).cwiseAbs().maxCoeff();
      r.check(dev <= 1e-8, "chunked vs sequential, T=" + std::to_string(T) + " C=" + std::to_string(C), dev);
    }
  }

  // Negative forget gates with a large regularizer (state-tracking regime).
  for (int i = 0; i < 10; ++i) {
    const Eigen::Index T = 8 + static_cast<Eigen::Index>(rng.below(40));
    MesaSequence seq = random_sequence(rng, 6, 5, T, -1.0);
    const Vec lambda = uniform_vec(rng, 6, 49.0, 60.0);
    const MesaSequentialResult ref = mesa_forward_sequential(seq, lambda, tight);
    const MesaForward f = mesa_forward_chunked(seq, lambda, 8, tight);
    const double dev = (f.O - ref.O).cwiseAbs().maxCoeff();
    r.check(dev <= 1e-8, "negative gamma chunked vs sequential", dev);
  }

  // Mesa output equals the readout of the closed-form optimal map.
  for (int i = 0; i < 20; ++i) {
    const Eigen::Index T = 1 + static_cast<Eigen::Index>(rng.below(30));
    const MesaSequence seq = random_sequence(rng, 5, 4, T, 0.3);
    const Vec lambda = uniform_vec(rng, 5, 0.25, 2.0);
    const MesaSequentialResult ref = mesa_forward_sequential(seq, lambda, tight);
    const Mat phi = closed_form_phi(seq.K, seq.V, seq.beta, seq.gamma, lambda);
    const double dev = (phi * seq.Q.col(T - 1) - ref.O.col(T - 1)).cwiseAbs().maxCoeff();
    r.check(dev <= 1e-8, "output is the optimal map's readout", dev);

    const double gmax = mesa_objective_gradient(phi, seq.K, seq.V, seq.beta, seq.gamma, lambda).cwiseAbs().maxCoeff();
    r.check(gmax <= 1e-7, "objective gradient vanishes at the optimum", gmax);
    const double f0 = mesa_objective(phi, seq.K, seq.V, seq.beta, seq.gamma, lambda);
    bool never_lower = true;
    for (int p = 0; p < 100; ++p) {
      const Mat pert = phi + 1e-3 * rng.normal_mat(phi.rows(), phi.cols());
      if (mesa_objective(pert, seq.K, seq.V, seq.beta, seq.gamma, lambda) < f0) never_lower = false;
    }
    r.check(never_lower, "random perturbations never lower the objective");
  }

  // One write stores the pair: o = v / (1 + lambda) for a unit key.
  for (int i = 0; i < 10; ++i) {
    const Vec k = rng.unit_vec(8), v = rng.normal_vec(8);
    const double lam = rng.uniform(1e-3, 2.0);
    const MesaStepResult s =
        mesa_step(MesaState::zeros(8, 8), k, v, k, {1.0, 1.0}, Vec::Constant(8, lam), {1e-14, 100});
    const double dev = (s.o - v / (1.0 + lam)).norm();
    r.check(dev <= 1e-10, "one-shot write retrieval", dev);
  }
  return r;
}

SuiteResult run_baselines_suite(std::uint64_t seed) {
  SuiteResult r("baselines");
  Rng rng = Rng(seed).derive("verify.baselines");
  for (int i = 0; i < 50; ++i) {
    const Eigen::Index n_a = 2 + static_cast<Eigen::Index>(rng.below(15));
    const Eigen::Index n_v = 2 + static_cast<Eigen::Index>(rng.below(15));
    const Mat phi = rng.normal_mat(n_v, n_a);
    const Vec k = rng.unit_vec(n_a), v = rng.normal_vec(n_v);
    const double beta = rng.uniform(0.05, 1.0), gamma = rng.uniform(0.0, 1.0);
    const double g = gla_gradient_step_check(phi, k, v, beta, gamma);
    r.check(g <= 1e-12, "gla update is a gradient step", g);
    const double d = deltanet_gradient_step_check(phi, k, v, beta);
    r.check(d <= 1e-12, "deltanet update is a gradient step", d);
  }

  // Gated DeltaNet with gamma = 1 is DeltaNet; GLA with beta = 1 is Mamba2.
  for (int i = 0; i < 20; ++i) {
    const LinearAttnState s{rng.normal_mat(4, 6), std::nullopt};
    const Vec k = rng.unit_vec(6), v = rng.normal_vec(4), q = rng.normal_vec(6);
    const double beta = rng.uniform(0.0, 1.0), gamma = rng.uniform(0.0, 1.0);
    const double a = (gated_deltanet_step(s, k, v, q, beta, 1.0).o - deltanet_step(s, k, v, q, beta).o).cwiseAbs().maxCoeff();
    r.check(a <= 1e-14, "gated deltanet with gamma=1 equals deltanet", a);
    const double b = (gla_step(s, k, v, q, 1.0, gamma).o - mamba2_step(s, k, v, q, gamma).o).cwiseAbs().maxCoeff();
    r.check(b <= 1e-14, "gla with beta=1 equals mamba2", b);
  }

  // Sequence forward matches stepping, for every recurrence.
  for (Recurrence kind : {Recurrence::gla, Recurrence::mamba2, Recurrence::deltanet, Recurrence::gated_deltanet,
                          Recurrence::mlstm}) {
    const MesaSequence seq = random_sequence(rng, 5, 4, 20, 0.3);
    const RecurrentForward f = recurrent_forward(kind, seq);
    LinearAttnState s = LinearAttnState::zeros(4, 5, kind == Recurrence::mlstm);
    double worst = 0.0;
    for (Eigen::Index t = 0; t < 20; ++t) {
      const Vec k = seq.K.col(t), v = seq.V.col(t), q = seq.Q.col(t);
      const double b = seq.beta(t), g = seq.gamma(t);
      BaselineStep st;
      switch (kind) {
        case Recurrence::gla: st = gla_step(s, k, v, q, b, g); break;
        case Recurrence::mamba2: st = mamba2_step(s, k, v, q, g); break;
        case Recurrence::deltanet: st = deltanet_step(s, k, v, q, b); break;
        case Recurrence::gated_deltanet: st = gated_deltanet_step(s, k, v, q, b, g); break;
        case Recurrence::mlstm: st = mlstm_step(s, k, v, q, b, g); break;
      }
      worst = std::max(worst, (st.o - f.O.col(t)).cwiseAbs().maxCoeff());
      s = st.state;
    }
    r.check(worst <= 1e-12, std::string(to_string(kind)) + " sequence vs steps", worst);
  }

  // Causal softmax attention matches per-prefix evaluation.
  {
    const Mat K = rng.normal_mat(4, 12), V = rng.normal_mat(3, 12), Q = rng.normal_mat(4, 12);
    const Mat O = softmax_forward(K, V, Q);
    double worst = 0.0;
    for (Eigen::Index t = 0; t < 12; ++t) {
      const Vec o = softmax_attention(K.leftCols(t + 1), V.leftCols(t + 1), Q.col(t));
      worst = std::max(worst, (o - O.col(t)).cwiseAbs().maxCoeff());
    }
    r.check(worst <= 1e-12, "softmax causal forward vs prefixes", worst);
  }
  return r;
}

namespace {

bool fd_close(double analytic, double numeric) {
  return std::abs(analytic - numeric) <= std::max(1e-4 * std::abs(numeric), 1e-7);
}

struct FdTally {
  int mismatches = 0;
  double worst = 0.0;
  void add(double a, double f) {
    if (!fd_close(a, f)) ++mismatches;
    worst = std::max(worst, std::abs(a - f) / std::max(std::abs(f), 1e-7));
  }
};

template <class X, class A, class Loss>
void fd_matrix(X& x, const A& analytic, const Loss& loss, FdTally& tally, double h = 1e-6) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double lp = loss();
    x.data()[i] = saved - h;
    const double lm = loss();
    x.data()[i] = saved;
    tally.add(analytic.data()[i], (lp - lm) / (2 * h));
  }
}

}  // namespace

SuiteResult run_grads_suite(std::uint64_t seed) {
  SuiteResult r("grads");
  Rng rng = Rng(seed).derive("verify.grads");
  const CgOptions tight{1e-13, 400, CgInit::diagonal};

  for (int i = 0; i < 20; ++i) {
    const Eigen::Index n_a = 2 + static_cast<Eigen::Index>(rng.below(7));
    const Eigen::Index n_v = 2 + static_cast<Eigen::Index>(rng.below(7));
    const Eigen::Index T = 2 + static_cast<Eigen::Index>(rng.below(15));
    const int chunk = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(T)));
    MesaSequence seq = random_sequence(rng, n_a, n_v, T, 0.3);
    Vec lambda = uniform_vec(rng, n_a, 0.25, 2.0);
    const Mat E = rng.normal_mat(n_v, T);
    const MesaForward fwd = mesa_forward_chunked(seq, lambda, chunk, tight);
    const MesaGrads g = mesa_backward_chunked(seq, lambda, fwd, E, tight);
    auto loss = [&] { return (mesa_forward_chunked(seq, lambda, chunk, tight).O.cwiseProduct(E)).sum(); };
    FdTally tally;
    fd_matrix(seq.Q, g.dQ, loss, tally);
    fd_matrix(seq.K, g.dK, loss, tally);
    fd_matrix(seq.V, g.dV, loss, tally);
    fd_matrix(seq.beta, g.dbeta, loss, tally);
    fd_matrix(seq.gamma, g.dgamma, loss, tally);
    fd_matrix(lambda, g.dlambda, loss, tally);
    r.check(tally.mismatches == 0, "mesa gradients vs central differences, T=" + std::to_string(T), tally.worst);
  }

  for (Recurrence kind : {Recurrence::gla, Recurrence::mamba2, Recurrence::deltanet, Recurrence::gated_deltanet,
                          Recurrence::mlstm}) {
    for (int i = 0; i < 4; ++i) {
      MesaSequence seq = random_sequence(rng, 4, 3, 10, 0.3);
      seq.Q *= 2.0;
      const Mat E = rng.normal_mat(3, 10);
      const RecurrentGrads g = recurrent_backward(kind, seq, recurrent_forward(kind, seq), E);
      auto loss = [&] { return recurrent_forward(kind, seq).O.cwiseProduct(E).sum(); };
      FdTally tally;
      fd_matrix(seq.Q, g.dQ, loss, tally);
      fd_matrix(seq.K, g.dK, loss, tally);
      fd_matrix(seq.V, g.dV, loss, tally);
      fd_matrix(seq.beta, g.dbeta, loss, tally);
      fd_matrix(seq.gamma, g.dgamma, loss, tally);
      r.check(tally.mismatches == 0, std::string(to_string(kind)) + " gradients vs central differences", tally.worst);
    }
  }

  {
    Mat K = rng.normal_mat(4, 9), V = rng.normal_mat(3, 9), Q = rng.normal_mat(4, 9);
    const Mat E = rng.normal_mat(3, 9);
    const SoftmaxGrads g = softmax_backward(K, V, Q, E);
    auto loss = [&] { return softmax_forward(K, V, Q).cwiseProduct(E).sum(); };
    FdTally tally;
    fd_matrix(Q, g.dQ, loss, tally);
    fd_matrix(K, g.dK, loss, tally);
    fd_matrix(V, g.dV, loss, tally);
    r.check(tally.mismatches == 0, "softmax gradients vs central differences", tally.worst);
  }
  return r;
}

SuiteResult run_app_f_suite(std::uint64_t seed) {
  SuiteResult r("app_f");
  Rng rng = Rng(seed).derive("verify.app_f");

  // Recursive least squares without forgetting reproduces the CG path.
  for (int i = 0; i < 5; ++i) {
    const Eigen::Index n = 6, T = 20;
    MesaSequence seq = random_sequence(rng, n, 4, T, 1.0);
    seq.beta.setOnes();
    seq.gamma.setOnes();
    const Vec lambda = uniform_vec(rng, n, 0.25, 2.0);
    const MesaSequentialResult cg = mesa_forward_sequential(seq, lambda, {1e-14, 200});
    Mat rinv = lambda.cwiseInverse().asDiagonal();
    Mat G = Mat::Zero(4, n);
    double worst = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) {
      rinv = sherman_morrison_step(rinv, seq.K.col(t));
      G += seq.V.col(t) * seq.K.col(t).transpose();
      worst = std::max(worst, (G * rinv * seq.Q.col(t) - cg.O.col(t)).cwiseAbs().maxCoeff());
    }
    r.check(worst <= 1e-8, "Sherman-Morrison path vs CG path", worst);
  }

  for (int i = 0; i < 20; ++i) {
    const Eigen::Index n_a = 2 + static_cast<Eigen::Index>(rng.below(10));
    const Eigen::Index T = 2 + static_cast<Eigen::Index>(rng.below(20));
    const Mat K = unit_columns(rng, n_a, T);
    const Mat V = rng.normal_mat(3, T);
    const Vec lambda = uniform_vec(rng, n_a, 0.25, 2.0);
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(T)));
    const double dev = newton_identity_check(K, V, lambda, t);
    r.check(dev <= 1e-8, "Newton identity at t=" + std::to_string(t), dev);
  }
  return r;
}

const std::vector<std::pair<std::string, Suite>>& verify_suites() {
  static const std::vector<std::pair<std::string, Suite>> suites = {
      {"cg", run_cg_suite},
      {"mesa", run_mesa_suite},
      {"baselines", run_baselines_suite},
      {"grads", run_grads_suite},
      {"app_f", run_app_f_suite},
  };
  return suites;
}

}  // namespace mesanet::cli
