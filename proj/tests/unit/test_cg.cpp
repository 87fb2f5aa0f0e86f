#include <gtest/gtest.h>

#include "mesanet/cg.hpp"
#include "oracles.hpp"

using namespace mesanet;

namespace {

SpdOperator random_spd(Rng& rng, Eigen::Index n, double lambda) {
  SpdOperator op;
  op.base = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < 2 * n; ++i) {
    const Vec k = rng.unit_vec(n);
    op.base = rng.uniform(0.5, 1.0) * op.base + k * k.transpose();
  }
  op.lambda = Vec::Constant(n, lambda);
  return op;
}

// Residual history of a solve, reconstructed by re-running with growing caps.
std::vector<double> residual_history(const SpdOperator& op, const Vec& q, int n) {
  std::vector<double> out;
  for (int k = 0; k <= n; ++k) out.push_back(cg_solve(op, q, {0.0, k}).report.relative_residual);
  return out;
}

}  // namespace

TEST(CgSolve, DiagonalSystemsAreSolvedByTheInitializer) {
  SpdOperator a{Mat::Zero(2, 2), Vec::Ones(2), std::nullopt, std::nullopt};
  const CgResult r1 = cg_solve(a, Vec{{1.0, 2.0}}, {1e-10, 30});
  EXPECT_EQ(r1.report.iterations, 0);
  EXPECT_TRUE(r1.report.converged);
  EXPECT_TRUE(r1.x.isApprox(Vec{{1.0, 2.0}}, 1e-15));

  SpdOperator b{Vec{{1.0, 3.0}}.asDiagonal(), Vec::Ones(2), std::nullopt, std::nullopt};
  const CgResult r2 = cg_solve(b, Vec{{2.0, 8.0}}, {1e-10, 30});
  EXPECT_EQ(r2.report.iterations, 0);
  EXPECT_TRUE(r2.x.isApprox(Vec{{1.0, 2.0}}, 1e-15));
}

TEST(CgSolve, MatchesDirectSolve) {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const SpdOperator op = random_spd(rng, 8, 0.25);
    const Vec q = rng.normal_vec(8);
    const CgResult r = cg_solve(op, q, {1e-10, 100});
    const Vec direct = op.dense().fullPivLu().solve(q);
    EXPECT_LE((r.x - direct).norm() / direct.norm(), 1e-8);
    EXPECT_TRUE(r.report.converged);
    EXPECT_LE(r.report.relative_residual, 1e-10);
  }
}

TEST(CgSolve, RankOneUpdateOperator) {
  Rng rng(2);
  SpdOperator op = random_spd(rng, 6, 0.5);
  op.gamma = 0.7;
  op.key = rng.unit_vec(6);
  Mat dense = 0.7 * op.base + *op.key * op.key->transpose();
  dense.diagonal() += op.lambda;
  EXPECT_TRUE(op.dense().isApprox(dense, 1e-15));
  EXPECT_TRUE(op.diagonal().isApprox(dense.diagonal(), 1e-15));
  const Vec p = rng.normal_vec(6);
  EXPECT_TRUE(op.apply(p).isApprox(dense * p, 1e-13));
  const Vec q = rng.normal_vec(6);
  EXPECT_LE((cg_solve(op, q, {1e-12, 60}).x - dense.ldlt().solve(q)).norm(), 1e-10);
}

TEST(CgSolve, ExactTerminationWithinDimension) {
  Rng rng(3);
  for (Eigen::Index n : {2, 4, 8, 16}) {
    const SpdOperator op = random_spd(rng, n, 0.25);
    const Vec q = rng.normal_vec(n);
    const CgResult r = cg_solve(op, q, {0.0, static_cast<int>(n)});
    EXPECT_LE(r.report.iterations, n);
    const Vec direct = op.dense().ldlt().solve(q);
    EXPECT_LE((r.x - direct).norm() / direct.norm(), 1e-9) << "n=" << n;
  }
}

TEST(CgSolve, ResidualsNonIncreasing) {
  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    const SpdOperator op = random_spd(rng, 12, 0.25);
    const auto hist = residual_history(op, rng.normal_vec(12), 12);
    for (std::size_t k = 1; k < hist.size(); ++k) EXPECT_LE(hist[k], hist[k - 1] * (1 + 1e-9) + 1e-15);
  }
}

TEST(CgSolve, LargerToleranceNeverUsesMoreIterations) {
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    const SpdOperator op = random_spd(rng, 16, 0.25);
    const Vec q = rng.normal_vec(16);
    int prev = std::numeric_limits<int>::max();
    for (double eps : {0.0, 1e-12, 1e-8, 1e-6, 1e-4, 1e-2, 1e-1}) {
      const int it = cg_solve(op, q, {eps, 30}).report.iterations;
      EXPECT_LE(it, prev);
      prev = it;
    }
  }
}

TEST(CgSolve, IterationCapAndReport) {
  Rng rng(6);
  const SpdOperator op = random_spd(rng, 16, 0.25);
  const CgResult r = cg_solve(op, rng.normal_vec(16), {1e-14, 3});
  EXPECT_EQ(r.report.iterations, 3);
  EXPECT_FALSE(r.report.converged);
  EXPECT_GT(r.report.relative_residual, 1e-14);
}

TEST(CgSolve, ZeroInitialResidualConvergesImmediately) {
  Rng rng(7);
  const SpdOperator op = random_spd(rng, 5, 1.0);
  const CgResult r = cg_solve(op, Vec::Zero(5), {1e-10, 30});
  EXPECT_EQ(r.report.iterations, 0);
  EXPECT_TRUE(r.report.converged);
}

TEST(CgSolve, QueryInitializer) {
  SpdOperator a{Mat::Zero(2, 2), Vec::Constant(2, 2.0), std::nullopt, std::nullopt};
  const CgResult r = cg_solve(a, Vec{{1.0, 2.0}}, {0.0, 0, CgInit::query});
  EXPECT_TRUE(r.x.isApprox(Vec{{1.0, 2.0}}, 0.0));
}

TEST(CgSolve, DetectsLossOfPositiveDefiniteness) {
  SpdOperator bad{Vec{{1.0, -5.0}}.asDiagonal(), Vec::Constant(2, 0.5), std::nullopt, std::nullopt};
  EXPECT_THROW(cg_solve(bad, Vec{{1.0, 1.0}}, {1e-10, 10, CgInit::query}), NotPositiveDefinite);
}

TEST(CgSolveChunk, SingleColumnEqualsCgSolve) {
  Rng rng(8);
  const SpdOperator base = random_spd(rng, 6, 0.5);
  const Mat keys = rng.unit_vec(6);
  const Vec gamma = Vec::Constant(1, 0.8);
  const Mat rhs = rng.normal_vec(6);
  const CgChunkResult c = cg_solve_chunk(base.base, keys, DecayChunk::from_gates(gamma), base.lambda, rhs, {1e-10, 30});
  SpdOperator op = base;
  op.gamma = 0.8;
  op.key = keys.col(0);
  const CgResult s = cg_solve(op, rhs.col(0), {1e-10, 30});
  EXPECT_LE((c.x.col(0) - s.x).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(c.reports[0].iterations, s.report.iterations);
}

TEST(CgSolveChunk, UnitGatesTwoChunksMatchIndependentSolves) {
  Rng rng(9);
  const Eigen::Index n = 6;
  const Mat K = [&] {
    Mat m(n, 8);
    for (int t = 0; t < 8; ++t) m.col(t) = rng.unit_vec(n);
    return m;
  }();
  const Mat Q = rng.normal_mat(n, 8);
  const Vec lambda = Vec::Ones(n);
  Mat H = Mat::Zero(n, n);
  for (int c = 0; c < 2; ++c) {
    const Mat keys = K.middleCols(4 * c, 4);
    const CgChunkResult res =
        cg_solve_chunk(H, keys, DecayChunk::from_gates(Vec::Ones(4)), lambda, Q.middleCols(4 * c, 4), {1e-12, 50});
    for (int j = 0; j < 4; ++j) {
      const SpdOperator op{H, lambda, 1.0, Vec(keys.col(j))};
      const CgResult single = cg_solve(op, Q.col(4 * c + j), {1e-12, 50});
      EXPECT_LE((res.x.col(j) - single.x).cwiseAbs().maxCoeff(), 1e-10);
      H += keys.col(j) * keys.col(j).transpose();
    }
  }
}

TEST(CgSolveChunk, RandomGatesMatchDenseSolves) {
  Rng rng(10);
  const Eigen::Index n = 8, C = 16;
  const Mat h0 = random_spd(rng, n, 0.0).base;
  Mat keys(n, C);
  Vec gamma(C);
  for (Eigen::Index t = 0; t < C; ++t) {
    keys.col(t) = rng.unit_vec(n);
    gamma(t) = rng.uniform();
  }
  const Vec lambda = Vec::Constant(n, 0.25);
  const Mat rhs = rng.normal_mat(n, C);
  const CgChunkResult res = cg_solve_chunk(h0, keys, DecayChunk::from_gates(gamma), lambda, rhs, {1e-12, 100});
  Mat H = h0;
  for (Eigen::Index t = 0; t < C; ++t) {
    H = gamma(t) * H + keys.col(t) * keys.col(t).transpose();
    Mat A = H;
    A.diagonal() += lambda;
    EXPECT_LE((res.x.col(t) - A.ldlt().solve(rhs.col(t))).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(DecayChunk, MatchesProductDefinition) {
  const Vec g{{0.9, 0.5, 0.8, 0.3}};
  const DecayChunk d = DecayChunk::from_gates(g);
  for (Eigen::Index i = 0; i < 4; ++i) {
    EXPECT_NEAR(d.boundary(i), oracle::zeta(g, i, -1), 1e-15);
    for (Eigen::Index j = 0; j < 4; ++j) {
      EXPECT_NEAR(d.within(i, j), j >= i ? oracle::zeta(g, j, i) : 0.0, 1e-15);
    }
  }
}

TEST(EstimateCondition, IdentityIsOne) {
  Rng rng(11);
  const SpdOperator op{Mat::Zero(4, 4), Vec::Ones(4), std::nullopt, std::nullopt};
  EXPECT_NEAR(estimate_condition(op, 4, rng), 1.0, 1e-9);
}

TEST(EstimateCondition, DiagonalExample) {
  Rng rng(12);
  const SpdOperator op{Vec{{9.0, 0.0}}.asDiagonal(), Vec::Ones(2), std::nullopt, std::nullopt};
  EXPECT_NEAR(estimate_condition(op, 2, rng), 10.0, 1e-6);
}

TEST(EstimateCondition, WithinFivePercentOfEigensolver) {
  Rng rng(13);
  for (Eigen::Index n : {4, 8, 16, 32}) {
    const SpdOperator op = random_spd(rng, n, 0.25);
    const Eigen::SelfAdjointEigenSolver<Mat> es(op.dense());
    const double exact = es.eigenvalues().maxCoeff() / es.eigenvalues().minCoeff();
    const double est = estimate_condition(op, static_cast<int>(n), rng);
    EXPECT_NEAR(est / exact, 1.0, 0.05) << "n=" << n;
    EXPECT_GE(est, 1.0);
  }
}
