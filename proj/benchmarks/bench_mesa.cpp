#include <benchmark/benchmark.h>

#include "mesanet/baselines.hpp"
#include "mesanet/cg.hpp"
#include "mesanet/mesa.hpp"
#include "mesanet/rng.hpp"

using namespace mesanet;

namespace {

MesaSequence make_sequence(Eigen::Index n_a, Eigen::Index T) {
  Rng rng(42);
  MesaSequence s;
  s.K.resize(n_a, T);
  s.Q.resize(n_a, T);
  for (Eigen::Index t = 0; t < T; ++t) {
    s.K.col(t) = rng.unit_vec(n_a);
    s.Q.col(t) = rng.unit_vec(n_a);
  }
  s.V = rng.normal_mat(n_a, T);
  s.beta = Vec::NullaryExpr(T, [&] { return rng.uniform(0.1, 1.0); });
  s.gamma = Vec::NullaryExpr(T, [&] { return rng.uniform(0.9, 1.0); });
  return s;
}

void per_token(benchmark::State& state, Eigen::Index T) {
  state.SetItemsProcessed(state.iterations() * T);
}

void BM_MesaChunked(benchmark::State& state) {
  const Eigen::Index T = state.range(0), n_a = state.range(2);
  const MesaSequence s = make_sequence(n_a, T);
  const Vec lambda = Vec::Constant(n_a, 1.0);
  const CgOptions cg{0.0, static_cast<int>(state.range(3)), CgInit::diagonal};
  for (auto _ : state) benchmark::DoNotOptimize(mesa_forward_chunked(s, lambda, static_cast<int>(state.range(1)), cg).O);
  per_token(state, T);
}

void BM_MesaChunkedBackward(benchmark::State& state) {
  const Eigen::Index T = state.range(0), n_a = state.range(2);
  const MesaSequence s = make_sequence(n_a, T);
  const Vec lambda = Vec::Constant(n_a, 1.0);
  const CgOptions cg{0.0, static_cast<int>(state.range(3)), CgInit::diagonal};
  const Mat E = Mat::Ones(n_a, T);
  for (auto _ : state) {
    const MesaForward f = mesa_forward_chunked(s, lambda, static_cast<int>(state.range(1)), cg);
    benchmark::DoNotOptimize(mesa_backward_chunked(s, lambda, f, E, cg).dK);
  }
  per_token(state, T);
}

void BM_MesaSequential(benchmark::State& state) {
  const Eigen::Index T = state.range(0), n_a = state.range(2);
  const MesaSequence s = make_sequence(n_a, T);
  const Vec lambda = Vec::Constant(n_a, 1.0);
  const CgOptions cg{0.0, static_cast<int>(state.range(3)), CgInit::diagonal};
  for (auto _ : state) benchmark::DoNotOptimize(mesa_forward_sequential(s, lambda, cg).O);
  per_token(state, T);
}

void BM_GlaRecurrent(benchmark::State& state) {
  const Eigen::Index T = state.range(0);
  const MesaSequence s = make_sequence(state.range(1), T);
  for (auto _ : state) benchmark::DoNotOptimize(recurrent_forward(Recurrence::gla, s).O);
  per_token(state, T);
}

void BM_CgSolve(benchmark::State& state) {
  const Eigen::Index n = state.range(0);
  Rng rng(7);
  SpdOperator op;
  op.base = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < 4 * n; ++i) {
    const Vec k = rng.unit_vec(n);
    op.base = 0.95 * op.base + k * k.transpose();
  }
  op.lambda = Vec::Constant(n, 0.25);
  const Vec q = rng.normal_vec(n);
  const CgOptions opts{1e-6, 30, CgInit::diagonal};
  for (auto _ : state) benchmark::DoNotOptimize(cg_solve(op, q, opts).x);
}

}  // namespace

// Args: T, C, n_a, cg steps.
BENCHMARK(BM_MesaChunked)->Args({512, 64, 32, 10})->Args({512, 16, 32, 10})->Args({2048, 64, 32, 10});
BENCHMARK(BM_MesaChunkedBackward)->Args({512, 64, 32, 10});
BENCHMARK(BM_MesaSequential)->Args({512, 1, 32, 10})->Args({2048, 1, 32, 10});
BENCHMARK(BM_GlaRecurrent)->Args({512, 32})->Args({2048, 32});
BENCHMARK(BM_CgSolve)->Arg(16)->Arg(32)->Arg(64);
BENCHMARK_MAIN();
