#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mesanet/trainer.hpp"
#include "oracles.hpp"

using namespace mesanet;

namespace {

ParameterSet single(double value, bool decay = true) {
  ParameterSet ps;
  ps.add("p", Tensor({1}, {value}), decay);
  return ps;
}

ModelConfig small_model(MixerKind kind = MixerKind::mesa) {
  ModelConfig m;
  m.n_layers = 1;
  m.n_e = 8;
  m.n_heads = 2;
  m.n_a = 4;
  m.vocab = 2;
  m.mixer = kind;
  m.chunk = 4;
  return m;
}

TrainConfig short_run(int steps) {
  TrainConfig t;
  t.steps = steps;
  t.warmup = 2;
  t.batch = 4;
  t.eval_interval = 2;
  t.lr = 3e-3;
  t.task.seq_len = 8;
  t.task.eval_len = 8;
  t.task.eval_batch = 8;
  return t;
}

}  // namespace

TEST(CosineLr, WarmupAndDecayEndpoints) {
  TrainConfig c;
  c.lr = 1e-3;
  c.warmup = 100;
  c.steps = 1000;
  c.final_lr_fraction = 0.1;
  EXPECT_DOUBLE_EQ(cosine_lr(0, c), 1e-6);
  EXPECT_NEAR(cosine_lr(50, c), 1e-6 + 0.5 * (1e-3 - 1e-6), 1e-15);
  EXPECT_NEAR(cosine_lr(100, c), 1e-3, 1e-15);
  EXPECT_NEAR(cosine_lr(1000, c), 1e-4, 1e-15);
  for (int s : {100, 250, 550, 777, 999})
    EXPECT_NEAR(cosine_lr(s, c), oracle::cosine_schedule(s, 1e-3, 100, 1000, 0.1), 1e-15);
  for (int s = 101; s <= 1000; ++s) EXPECT_LE(cosine_lr(s, c), cosine_lr(s - 1, c) + 1e-18);
}

TEST(CosineLr, NoWarmup) {
  TrainConfig c;
  c.warmup = 0;
  c.steps = 10;
  EXPECT_DOUBLE_EQ(cosine_lr(0, c), c.lr);
}

TEST(AdamW, ZeroGradientOnlyDecays) {
  TrainConfig c;
  c.weight_decay = 0.0;
  ParameterSet ps = single(2.5);
  AdamState st;
  adamw_step(ps, {Tensor({1}, {0.0})}, st, 0.1, c);
  EXPECT_EQ(ps.at("p")[0], 2.5);
  c.weight_decay = 0.5;
  adamw_step(ps, {Tensor({1}, {0.0})}, st, 0.1, c);
  EXPECT_NEAR(ps.at("p")[0], 2.5 * (1 - 0.05), 1e-15);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  TrainConfig c;
  c.weight_decay = 0.0;
  ParameterSet ps = single(1.0);
  AdamState st;
  adamw_step(ps, {Tensor({1}, {1.0})}, st, 0.1, c);
  EXPECT_NEAR(ps.at("p")[0], 0.9, 1e-6);
  EXPECT_EQ(st.step, 1);
}

TEST(AdamW, UndecayedParametersAreNotShrunk) {
  TrainConfig c;
  c.weight_decay = 1.0;
  ParameterSet ps = single(3.0, false);
  AdamState st;
  adamw_step(ps, {Tensor({1}, {0.0})}, st, 0.1, c);
  EXPECT_EQ(ps.at("p")[0], 3.0);
}

TEST(AdamW, OnlyEmbeddingIsExemptFromDecay) {
  Rng rng(0);
  const ParameterSet ps = init_model_params(small_model(), rng);
  for (const auto& p : ps) EXPECT_EQ(p.decay, p.name != "embed") << p.name;
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  TrainConfig c;
  ParameterSet ps = single(1.0);
  AdamState st;
  try {
    adamw_step(ps, {Tensor({1}, {std::nan("")})}, st, 0.1, c);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("p"), std::string::npos);
  }
  EXPECT_EQ(ps.at("p")[0], 1.0);
}

TEST(Clip, GlobalNormBounded) {
  Rng rng(1);
  std::vector<Tensor> g = {Tensor::from_matrix(rng.normal_mat(4, 5, 10.0)), Tensor::from_matrix(rng.normal_mat(3, 1, 10.0))};
  const double before = clip_global_norm(g, 1.0);
  EXPECT_GT(before, 1.0);
  double ss = 0;
  for (const auto& t : g)
    for (double x : t.data()) ss += x * x;
  EXPECT_LE(std::sqrt(ss), 1.0 + 1e-9);
  std::vector<Tensor> small = {Tensor({2}, {0.1, 0.2})};
  clip_global_norm(small, 1.0);
  EXPECT_EQ(small[0][1], 0.2);
}

TEST(Tasks, ParityExamples) {
  const Batch b = parity_batch_from_bits({{1, 0, 1, 1}, {0, 0, 0, 0}});
  EXPECT_EQ(b.targets, (std::vector<int>{1, 1, 0, 1, 0, 0, 0, 0}));
  EXPECT_THROW(parity_batch_from_bits({{2}}), std::invalid_argument);
  Rng rng(2);
  const Batch r = make_parity_batch(16, 40, rng);
  for (std::size_t s = 0; s < 16; ++s) {
    std::vector<int> bits(r.tokens.begin() + s * 40, r.tokens.begin() + (s + 1) * 40);
    for (std::size_t t = 0; t < 40; ++t) EXPECT_EQ(r.targets[s * 40 + t], oracle::cumulative_xor(bits, t));
  }
}

TEST(Tasks, RecallInvariants) {
  Rng rng(3);
  const std::size_t n = 6, vocab = 24;
  const Batch b = make_recall_batch(32, n, vocab, rng);
  ASSERT_EQ(b.seq_len, 2 * n + 1);
  for (std::size_t s = 0; s < 32; ++s) {
    const int* t = b.tokens.data() + s * b.seq_len;
    std::set<int> keys;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_LT(t[2 * i], 12);
      EXPECT_GE(t[2 * i + 1], 12);
      EXPECT_LT(t[2 * i + 1], 24);
      keys.insert(t[2 * i]);
    }
    EXPECT_EQ(keys.size(), n);
    const int query = t[2 * n];
    int answer = -1;
    for (std::size_t i = 0; i < n; ++i)
      if (t[2 * i] == query) answer = t[2 * i + 1];
    EXPECT_EQ(b.targets[s * b.seq_len + 2 * n], answer);
    for (std::size_t i = 0; i < b.seq_len; ++i) EXPECT_EQ(b.mask[s * b.seq_len + i], i == 2 * n ? 1.0 : 0.0);
  }
  EXPECT_THROW(make_recall_batch(1, 13, 24, rng), std::invalid_argument);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  const ModelConfig m = small_model();
  TrainConfig t = short_run(3);
  t.lr = 0.0;
  t.warmup = 0;
  t.weight_decay = 0.5;
  Rng init = Rng(t.seed).derive("init");
  const ParameterSet start = init_model_params(m, init);
  const TrainResult r = train(m, t);
  ASSERT_FALSE(r.aborted);
  for (std::size_t i = 0; i < start.size(); ++i)
    for (std::size_t j = 0; j < start.entry(i).value.size(); ++j)
      EXPECT_EQ(r.params.entry(i).value[j], start.entry(i).value[j]);
}

TEST(Train, MetricsCadenceAndDeterminism) {
  const ModelConfig m = small_model(MixerKind::gla);
  const TrainConfig t = short_run(5);
  int sunk = 0;
  const TrainResult a = train(m, t, [&](const MetricsRecord&) { ++sunk; });
  const TrainResult b = train(m, t);
  ASSERT_EQ(a.metrics.size(), 3u);
  EXPECT_EQ(sunk, 3);
  EXPECT_EQ(a.metrics[0].step, 2);
  EXPECT_EQ(a.metrics[2].step, 5);
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(a.metrics[i].loss, b.metrics[i].loss);
    EXPECT_EQ(a.metrics[i].task_accuracy, b.metrics[i].task_accuracy);
    EXPECT_EQ(a.metrics[i].wall_ms, 0.0);
  }
  for (std::size_t i = 0; i < a.params.size(); ++i)
    for (std::size_t j = 0; j < a.params.entry(i).value.size(); ++j)
      EXPECT_EQ(a.params.entry(i).value[j], b.params.entry(i).value[j]);
}

TEST(Train, DifferentSeedsDiffer) {
  const ModelConfig m = small_model(MixerKind::gla);
  TrainConfig t = short_run(2);
  const TrainResult a = train(m, t);
  t.seed = 1;
  const TrainResult b = train(m, t);
  EXPECT_NE(a.metrics.back().loss, b.metrics.back().loss);
}

TEST(Train, MaskedPositionsDoNotAffectLoss) {
  Rng rng(4);
  const ModelConfig m = small_model();
  const ParameterSet ps = init_model_params(m, rng);
  Batch b = make_parity_batch(4, 8, rng);
  for (std::size_t i = 0; i < b.mask.size(); i += 2) b.mask[i] = 0.0;
  const EvalResult before = evaluate(m, ps, b);
  for (std::size_t i = 0; i < b.mask.size(); i += 2) b.targets[i] ^= 1;
  const EvalResult after = evaluate(m, ps, b);
  EXPECT_EQ(before.loss, after.loss);
  EXPECT_EQ(before.accuracy, after.accuracy);
}

TEST(Train, EvaluationIsIndependentOfPassSize) {
  Rng rng(5);
  const ModelConfig m = small_model();
  const ParameterSet ps = init_model_params(m, rng);
  const Batch b = make_parity_batch(6, 8, rng);
  const EvalResult whole = evaluate(m, ps, b);
  const EvalResult split = evaluate(m, ps, b, 8);
  EXPECT_NEAR(whole.loss, split.loss, 1e-12);
  EXPECT_EQ(whole.accuracy, split.accuracy);
}

TEST(Train, InvalidConfigRejected) {
  TrainConfig t;
  t.warmup = 2000;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  t = TrainConfig{};
  t.beta2 = 1.0;
  EXPECT_THROW(t.validate(), std::invalid_argument);
}
