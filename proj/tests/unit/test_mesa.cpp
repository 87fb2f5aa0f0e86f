#include <gtest/gtest.h>

#include "mesanet/baselines.hpp"
#include "mesanet/mesa.hpp"
#include "oracles.hpp"

using namespace mesanet;

namespace {

const CgOptions kTight{1e-12, 200, CgInit::diagonal};

MesaSequence random_sequence(Rng& rng, Eigen::Index n_a, Eigen::Index n_v, Eigen::Index T, double gamma_lo = 0.0) {
  MesaSequence s;
  s.K.resize(n_a, T);
  s.Q.resize(n_a, T);
  for (Eigen::Index t = 0; t < T; ++t) {
    s.K.col(t) = rng.unit_vec(n_a);
    s.Q.col(t) = rng.unit_vec(n_a);
  }
  s.V = rng.normal_mat(n_v, T);
  s.beta = Vec::NullaryExpr(T, [&] { return rng.uniform(); });
  s.gamma = Vec::NullaryExpr(T, [&] { return rng.uniform(gamma_lo, 1.0); });
  return s;
}

double max_abs(const Mat& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST(MesaStep, OneStepSelfQueryReturnsHalfValue) {
  Rng rng(1);
  const Vec k = rng.unit_vec(4), v = rng.normal_vec(4);
  const MesaStepResult r = mesa_step(MesaState::zeros(4, 4), k, v, k, {1.0, 1.0}, Vec::Ones(4), kTight);
  EXPECT_LE((r.o - v / 2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MesaStep, ZeroInputGateKeepsEmptyMemory) {
  Rng rng(2);
  const Vec k = rng.unit_vec(4), v = rng.normal_vec(3), q = rng.unit_vec(4);
  const MesaStepResult r = mesa_step(MesaState::zeros(3, 4), k, v, q, {0.0, 0.9}, Vec::Ones(4), kTight);
  EXPECT_TRUE(r.o.isZero(0.0));
  EXPECT_TRUE(r.state.G.isZero(0.0));
  EXPECT_TRUE(r.state.H.isZero(0.0));
}

TEST(MesaStep, StateUpdateFollowsRecurrence) {
  Rng rng(3);
  const MesaState s{rng.normal_mat(3, 4), [&] {
                      const Mat a = rng.normal_mat(4, 4);
                      return Mat(a * a.transpose());
                    }()};
  const Vec k = rng.unit_vec(4), v = rng.normal_vec(3), q = rng.unit_vec(4);
  const MesaStepResult r = mesa_step(s, k, v, q, {0.4, 0.7}, Vec::Ones(4), kTight);
  EXPECT_TRUE(r.state.G.isApprox(0.7 * s.G + 0.4 * v * k.transpose(), 1e-14));
  EXPECT_TRUE(r.state.H.isApprox(0.7 * s.H + 0.4 * k * k.transpose(), 1e-14));
  EXPECT_LE(max_abs(r.state.H - r.state.H.transpose()), 1e-10);
}

TEST(MesaStep, RandomStepsMatchClosedForm) {
  Rng rng(4);
  const MesaSequence seq = random_sequence(rng, 5, 4, 5);
  const Vec lambda = Vec::Constant(5, 0.5);
  MesaState s = MesaState::zeros(4, 5);
  for (Eigen::Index t = 0; t < 5; ++t) {
    const MesaStepResult r = mesa_step(s, seq.K.col(t), seq.V.col(t), seq.Q.col(t), {seq.beta(t), seq.gamma(t)},
                                       lambda, {0.0, 5, CgInit::diagonal});
    const Mat phi = closed_form_phi(seq.K.leftCols(t + 1), seq.V.leftCols(t + 1), seq.beta.head(t + 1),
                                    seq.gamma.head(t + 1), lambda);
    EXPECT_LE((r.o - phi * seq.Q.col(t)).cwiseAbs().maxCoeff(), 1e-8);
    s = r.state;
  }
}

TEST(ClosedFormPhi, RankOneRidge) {
  Rng rng(5);
  const Vec k = rng.unit_vec(4), v = rng.normal_vec(3);
  const double lam = 0.3;
  const Mat phi = closed_form_phi(k, v, Vec::Ones(1), Vec::Ones(1), Vec::Constant(4, lam));
  EXPECT_LE(max_abs(phi - v * k.transpose() / (1 + lam)), 1e-14);
}

TEST(ClosedFormPhi, ZeroValuesGiveZeroMap) {
  Rng rng(6);
  const MesaSequence s = random_sequence(rng, 4, 3, 6);
  EXPECT_TRUE(closed_form_phi(s.K, Mat::Zero(3, 6), s.beta, s.gamma, Vec::Ones(4)).isZero(0.0));
}

TEST(ClosedFormPhi, PerturbationsNeverLowerTheObjective) {
  Rng rng(7);
  const MesaSequence s = random_sequence(rng, 5, 4, 12);
  const Vec lambda = Vec::Constant(5, 0.25);
  const Mat phi = closed_form_phi(s.K, s.V, s.beta, s.gamma, lambda);
  const double f0 = mesa_objective(phi, s.K, s.V, s.beta, s.gamma, lambda);
  for (int i = 0; i < 100; ++i) {
    Mat delta = rng.normal_mat(4, 5);
    delta *= 1e-3 / delta.norm();
    EXPECT_GE(mesa_objective(phi + delta, s.K, s.V, s.beta, s.gamma, lambda), f0);
  }
}

TEST(MesaObjective, TrivialValues) {
  Rng rng(8);
  const MesaSequence s = random_sequence(rng, 4, 3, 6);
  const Vec lambda = Vec::Ones(4);
  EXPECT_EQ(mesa_objective(Mat::Zero(3, 4), s.K, Mat::Zero(3, 6), s.beta, s.gamma, lambda), 0.0);
  double expected = 0.0;
  for (Eigen::Index t = 0; t < 6; ++t) expected += 0.5 * oracle::zeta(s.gamma, 5, t) * s.beta(t) * s.V.col(t).squaredNorm();
  EXPECT_NEAR(mesa_objective(Mat::Zero(3, 4), s.K, s.V, s.beta, s.gamma, lambda), expected, 1e-13);
}

TEST(MesaObjective, MatchesBruteForceSumAndGradient) {
  Rng rng(9);
  const MesaSequence s = random_sequence(rng, 4, 3, 7);
  const Vec lambda = Vec::NullaryExpr(4, [&] { return rng.uniform(0.25, 2.0); });
  const Mat phi = rng.normal_mat(3, 4);
  EXPECT_NEAR(mesa_objective(phi, s.K, s.V, s.beta, s.gamma, lambda),
              oracle::mesa_objective(phi, s.K, s.V, s.beta, s.gamma, lambda), 1e-12);
  const Mat grad = mesa_objective_gradient(phi, s.K, s.V, s.beta, s.gamma, lambda);
  const Vec fd = oracle::central_difference(
      [&](const Vec& x) {
        return oracle::mesa_objective(Eigen::Map<const Mat>(x.data(), 3, 4), s.K, s.V, s.beta, s.gamma, lambda);
      },
      Eigen::Map<const Vec>(phi.data(), phi.size()));
  for (Eigen::Index i = 0; i < fd.size(); ++i) EXPECT_TRUE(oracle::fd_close(grad.data()[i], fd(i)));
}

TEST(MesaOptimality, GradientVanishesAtImpliedMap) {
  Rng rng(10);
  const MesaSequence s = random_sequence(rng, 6, 4, 20);
  const Vec lambda = Vec::Constant(6, 0.5);
  const MesaForward f = mesa_forward_chunked(s, lambda, 4, kTight);
  MesaState st = MesaState::zeros(4, 6);
  for (Eigen::Index t = 0; t < 20; ++t) {
    st.G = s.gamma(t) * st.G + s.beta(t) * s.V.col(t) * s.K.col(t).transpose();
    st.H = s.gamma(t) * st.H + s.beta(t) * s.K.col(t) * s.K.col(t).transpose();
    Mat A = st.H;
    A.diagonal() += lambda;
    const Mat phi = st.G * A.inverse();
    const Mat g = mesa_objective_gradient(phi, s.K.leftCols(t + 1), s.V.leftCols(t + 1), s.beta.head(t + 1),
                                          s.gamma.head(t + 1), lambda);
    EXPECT_LE(max_abs(g), 1e-7);
  }
  (void)f;
}

TEST(MesaForwardChunked, SingleChunkUnitGatesMatchesSequential) {
  Rng rng(11);
  MesaSequence s = random_sequence(rng, 6, 5, 12);
  s.beta.setOnes();
  s.gamma.setOnes();
  const Vec lambda = Vec::Ones(6);
  const Mat ref = mesa_forward_sequential(s, lambda, kTight).O;
  EXPECT_LE(max_abs(mesa_forward_chunked(s, lambda, 12, kTight).O - ref), 1e-10);
}

TEST(MesaForwardChunked, MatchesIndependentDenseOracle) {
  Rng rng(12);
  const MesaSequence s = random_sequence(rng, 8, 6, 64);
  const Vec lambda = Vec::NullaryExpr(8, [&] { return rng.uniform(0.25, 1.0); });
  const Mat ref = oracle::mesa_outputs(s.K, s.V, s.Q, s.beta, s.gamma, lambda);
  EXPECT_LE(max_abs(mesa_forward_chunked(s, lambda, 16, kTight).O - ref), 1e-8);
  EXPECT_LE(max_abs(mesa_forward_sequential(s, lambda, kTight).O - ref), 1e-8);
}

TEST(MesaForwardChunked, ChunkSizeInvariance) {
  Rng rng(13);
  const MesaSequence s = random_sequence(rng, 6, 4, 37);
  const Vec lambda = Vec::Constant(6, 0.25);
  const Mat ref = mesa_forward_chunked(s, lambda, 1, kTight).O;
  for (int C : {2, 4, 8, 16, 32, 37, 64}) {
    EXPECT_LE(max_abs(mesa_forward_chunked(s, lambda, C, kTight).O - ref), 1e-8) << "C=" << C;
  }
}

TEST(MesaForwardChunked, BoundaryStatesAreSymmetric) {
  Rng rng(14);
  const MesaSequence s = random_sequence(rng, 6, 4, 40);
  const MesaForward f = mesa_forward_chunked(s, Vec::Ones(6), 8, kTight);
  ASSERT_EQ(f.boundaries.size(), 5u);
  for (const auto& b : f.boundaries) EXPECT_LE(max_abs(b.H - b.H.transpose()), 1e-10);
  EXPECT_LE(max_abs(f.final_state.H - f.final_state.H.transpose()), 1e-10);
  EXPECT_GE(Eigen::SelfAdjointEigenSolver<Mat>(f.final_state.H).eigenvalues().minCoeff(), -1e-8);
}

TEST(MesaForwardChunked, ZeroIterationsGiveDiagonallyScaledGla) {
  Rng rng(15);
  const MesaSequence s = random_sequence(rng, 5, 4, 20);
  const Vec lambda = Vec::Constant(5, 0.5);
  const Mat O = mesa_forward_chunked(s, lambda, 4, {0.0, 0, CgInit::diagonal}).O;
  for (Eigen::Index t = 0; t < 20; ++t) {
    const Mat H = oracle::mesa_H(s.K, s.beta, s.gamma, t);
    const Vec qs = s.Q.col(t).cwiseQuotient(H.diagonal() + lambda);
    const Vec expected = oracle::gla_output(s.K, s.V, qs, s.beta, s.gamma, t);
    EXPECT_LE((O.col(t) - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MesaForwardChunked, RejectsInvalidGatesAndRegularizer) {
  Rng rng(16);
  MesaSequence s = random_sequence(rng, 4, 3, 5);
  EXPECT_THROW(mesa_forward_chunked(s, Vec::Zero(4), 2, kTight), std::invalid_argument);
  s.beta(2) = -0.1;
  EXPECT_THROW(mesa_forward_chunked(s, Vec::Ones(4), 2, kTight), std::invalid_argument);
}

TEST(MesaBackward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(17);
  const MesaSequence s = random_sequence(rng, 4, 3, 9);
  const Vec lambda = Vec::Ones(4);
  const MesaForward f = mesa_forward_chunked(s, lambda, 4, kTight);
  const MesaGrads g = mesa_backward_chunked(s, lambda, f, Mat::Zero(3, 9), kTight);
  EXPECT_TRUE(g.dK.isZero(0.0) && g.dV.isZero(0.0) && g.dQ.isZero(0.0));
  EXPECT_TRUE(g.dbeta.isZero(0.0) && g.dgamma.isZero(0.0) && g.dlambda.isZero(0.0));
}

namespace {

void expect_mesa_fd(const MesaSequence& base, const Vec& lambda0, int chunk, std::uint64_t seed) {
  Rng rng(seed);
  const Mat E = rng.normal_mat(base.V.rows(), base.length());
  const MesaForward f = mesa_forward_chunked(base, lambda0, chunk, kTight);
  const MesaGrads g = mesa_backward_chunked(base, lambda0, f, E, kTight);
  const auto loss = [&](const MesaSequence& s, const Vec& lambda) {
    return oracle::mesa_outputs(s.K, s.V, s.Q, s.beta, s.gamma, lambda).cwiseProduct(E).sum();
  };
  auto check = [&](auto member, const auto& analytic, const char* what) {
    MesaSequence s = base;
    auto& x = s.*member;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double saved = x.data()[i], h = 1e-6;
      x.data()[i] = saved + h;
      const double fp = loss(s, lambda0);
      x.data()[i] = saved - h;
      const double fm = loss(s, lambda0);
      x.data()[i] = saved;
      const double numeric = (fp - fm) / (2 * h);
      EXPECT_TRUE(oracle::fd_close(analytic.data()[i], numeric))
          << what << "[" << i << "] analytic " << analytic.data()[i] << " numeric " << numeric;
    }
  };
  check(&MesaSequence::Q, g.dQ, "dQ");
  check(&MesaSequence::K, g.dK, "dK");
  check(&MesaSequence::V, g.dV, "dV");
  check(&MesaSequence::beta, g.dbeta, "dbeta");
  check(&MesaSequence::gamma, g.dgamma, "dgamma");
  const Vec fd = oracle::central_difference([&](const Vec& l) { return loss(base, l); }, lambda0);
  for (Eigen::Index i = 0; i < fd.size(); ++i) EXPECT_TRUE(oracle::fd_close(g.dlambda(i), fd(i))) << "dlambda " << i;
}

}  // namespace

TEST(MesaBackward, TinyConfigMatchesFiniteDifferences) {
  Rng rng(18);
  expect_mesa_fd(random_sequence(rng, 4, 4, 3), Vec::Constant(4, 0.7), 2, 1);
}

TEST(MesaBackward, RandomConfigsMatchFiniteDifferences) {
  Rng rng(19);
  for (int i = 0; i < 5; ++i) {
    const Eigen::Index n_a = 2 + static_cast<Eigen::Index>(rng.below(7)), n_v = 2 + static_cast<Eigen::Index>(rng.below(7));
    const Eigen::Index T = 2 + static_cast<Eigen::Index>(rng.below(15));
    const Vec lambda = Vec::NullaryExpr(n_a, [&] { return rng.uniform(0.25, 2.0); });
    expect_mesa_fd(random_sequence(rng, n_a, n_v, T, 0.2), lambda, 1 + static_cast<int>(rng.below(T)), 100 + i);
  }
}

TEST(MesaBackward, NegativeForgetGatesWithLargeRegularizer) {
  Rng rng(20);
  expect_mesa_fd(random_sequence(rng, 4, 3, 10, -1.0), Vec::Constant(4, 50.0), 4, 7);
}

TEST(MesaBackward, ChunkSizeInvariance) {
  Rng rng(21);
  const MesaSequence s = random_sequence(rng, 6, 5, 32);
  const Vec lambda = Vec::Constant(6, 0.5);
  const Mat E = rng.normal_mat(5, 32);
  const MesaGrads a = mesa_backward_chunked(s, lambda, mesa_forward_chunked(s, lambda, 8, kTight), E, kTight);
  const MesaGrads b = mesa_backward_chunked(s, lambda, mesa_forward_chunked(s, lambda, 32, kTight), E, kTight);
  EXPECT_LE(max_abs(a.dK - b.dK), 1e-8);
  EXPECT_LE(max_abs(a.dV - b.dV), 1e-8);
  EXPECT_LE(max_abs(a.dQ - b.dQ), 1e-8);
  EXPECT_LE(max_abs(a.dbeta - b.dbeta), 1e-8);
  EXPECT_LE(max_abs(a.dgamma - b.dgamma), 1e-8);
  EXPECT_LE(max_abs(a.dlambda - b.dlambda), 1e-8);
}

TEST(ShermanMorrison, UnitBasisUpdate) {
  const Mat out = sherman_morrison_step(Mat::Identity(3, 3), Vec::Unit(3, 0));
  EXPECT_LE(max_abs(out - Vec{{0.5, 1.0, 1.0}}.asDiagonal().toDenseMatrix()), 1e-15);
}

TEST(ShermanMorrison, TwoUpdatesEqualDenseInverse) {
  Rng rng(22);
  const Vec lambda = Vec::NullaryExpr(5, [&] { return rng.uniform(0.25, 2.0); });
  const Vec k1 = rng.unit_vec(5), k2 = rng.unit_vec(5);
  const Mat r = sherman_morrison_step(sherman_morrison_step(lambda.cwiseInverse().asDiagonal(), k1), k2);
  Mat R = lambda.asDiagonal();
  R += k1 * k1.transpose() + k2 * k2.transpose();
  EXPECT_LE(max_abs(r - R.inverse()), 1e-12);
}

TEST(ShermanMorrison, RejectsNonPositiveDenominator) {
  EXPECT_THROW(sherman_morrison_step(-Mat::Identity(2, 2), Vec::Unit(2, 0)), NumericError);
}

TEST(ShermanMorrison, TwentyStepsMatchCgPath) {
  Rng rng(23);
  MesaSequence s = random_sequence(rng, 6, 4, 20);
  s.beta.setOnes();
  s.gamma.setOnes();
  const Vec lambda = Vec::NullaryExpr(6, [&] { return rng.uniform(0.25, 1.0); });
  const Mat O = mesa_forward_sequential(s, lambda, kTight).O;
  Mat rinv = lambda.cwiseInverse().asDiagonal();
  Mat G = Mat::Zero(4, 6);
  for (Eigen::Index t = 0; t < 20; ++t) {
    rinv = sherman_morrison_step(rinv, s.K.col(t));
    G += s.V.col(t) * s.K.col(t).transpose();
    EXPECT_LE((G * rinv * s.Q.col(t) - O.col(t)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(NewtonIdentity, Examples) {
  Rng rng(24);
  const MesaSequence s = random_sequence(rng, 6, 4, 8);
  EXPECT_LE(newton_identity_check(s.K, s.V, Vec::Ones(6), 1), 1e-10);
  EXPECT_LE(newton_identity_check(s.K, s.V, Vec::Constant(6, 0.5), 8), 1e-8);
  EXPECT_EQ(newton_identity_check(s.K, Mat::Zero(4, 8), Vec::Ones(6), 5), 0.0);
}

TEST(OneShotMemory, SingleWriteRetrieval) {
  Rng rng(25);
  for (double lam : {1.0, 0.1, 1e-3}) {
    const Vec k = rng.unit_vec(8), v = rng.normal_vec(8);
    const MesaStepResult r = mesa_step(MesaState::zeros(8, 8), k, v, k, {1.0, 1.0}, Vec::Constant(8, lam), {1e-14, 50});
    EXPECT_LE((r.o - v / (1 + lam)).norm(), 1e-10);
  }
}
