#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "mesanet/rng.hpp"
#include "mesanet/tape.hpp"
#include "oracles.hpp"

using namespace mesanet;

namespace {

using Graph = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = scale * rng.normal();
  return t;
}

// Weights the graph output by fixed random coefficients so every output entry
// contributes a distinct gradient.
double evaluate(const Graph& g, const std::vector<Tensor>& inputs, const Tensor& weights) {
  Tape tape;
  std::vector<NodeId> ids;
  for (const auto& x : inputs) ids.push_back(tape.constant(x));
  const Tensor& out = tape.value(g(tape, ids));
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
  return s;
}

void expect_gradients_match_fd(const Graph& g, std::vector<Tensor> inputs, std::uint64_t seed = 0,
                               double h = 1e-5) {
  Rng rng(seed);
  Tape tape;
  std::vector<NodeId> ids;
  for (const auto& x : inputs) ids.push_back(tape.variable(x));
  const NodeId out = g(tape, ids);
  const Tensor weights = random_tensor(rng, tape.value(out).shape());
  const NodeId loss = ops::sum(tape, ops::mul(tape, out, tape.constant(weights)));
  const Gradients grads = tape.backward(loss);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor& analytic = grads.at(ids[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + h;
      const double fp = evaluate(g, inputs, weights);
      inputs[k][i] = saved - h;
      const double fm = evaluate(g, inputs, weights);
      inputs[k][i] = saved;
      const double numeric = (fp - fm) / (2 * h);
      EXPECT_TRUE(oracle::fd_close(analytic[i], numeric, 1e-4, 1e-6))
          << "input " << k << " entry " << i << ": analytic " << analytic[i] << " numeric " << numeric;
    }
  }
}

}  // namespace

TEST(Tape, RecordAdd) {
  Tape t;
  const NodeId a = t.constant(Tensor::scalar(1.0));
  const NodeId b = t.constant(Tensor::scalar(2.0));
  EXPECT_EQ(t.value(ops::add(t, a, b))[0], 3.0);
}

TEST(Tape, MatmulShapeRule) {
  Tape t;
  const NodeId a = t.constant(Tensor({2, 3}, 1.0));
  const NodeId b = t.constant(Tensor({3, 2}, 1.0));
  const NodeId c = ops::matmul(t, a, b);
  EXPECT_EQ(t.value(c).shape(), (Shape{2, 2}));
  EXPECT_EQ(t.value(c)(1, 1), 3.0);
  EXPECT_THROW(ops::matmul(t, a, a), ShapeError);
  EXPECT_THROW(ops::add(t, a, b), ShapeError);
}

TEST(Tape, SumOfSquaresGradient) {
  Rng rng(1);
  Tape t;
  const Tensor xv = random_tensor(rng, {4});
  const NodeId x = t.variable(xv);
  const Gradients g = t.backward(ops::sum(t, ops::mul(t, x, x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g.at(x)[i], 2 * xv[i]);
}

TEST(Tape, ElementwiseProductGradients) {
  Rng rng(2);
  Tape t;
  const Tensor av = random_tensor(rng, {2, 3}), bv = random_tensor(rng, {2, 3});
  const NodeId a = t.variable(av), b = t.variable(bv);
  const Gradients g = t.backward(ops::sum(t, ops::mul(t, a, b)));
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(g.at(a)[i], bv[i]);
    EXPECT_EQ(g.at(b)[i], av[i]);
  }
}

TEST(Tape, DuplicatedSubexpressionsAccumulate) {
  Rng rng(3);
  const Tensor xv = random_tensor(rng, {5});
  Tape t1;
  const NodeId x1 = t1.variable(xv);
  const NodeId f1 = ops::silu(t1, x1);
  const Gradients g1 = t1.backward(ops::sum(t1, ops::add(t1, f1, ops::silu(t1, x1))));
  Tape t2;
  const NodeId x2 = t2.variable(xv);
  const Gradients g2 = t2.backward(ops::sum(t2, ops::scale(t2, ops::silu(t2, x2), 2.0)));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(g1.at(x1)[i], g2.at(x2)[i], 1e-15);
}

TEST(Tape, SecondBackwardThrows) {
  Tape t;
  const NodeId x = t.variable(Tensor::scalar(2.0));
  const NodeId loss = ops::sum(t, ops::mul(t, x, x));
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), std::logic_error);
}

TEST(Tape, BackwardRequiresScalarLoss) {
  Tape t;
  const NodeId x = t.variable(Tensor({3}, 1.0));
  EXPECT_THROW(t.backward(ops::silu(t, x)), ShapeError);
}

TEST(Tape, GradientsCoverEveryVariable) {
  Tape t;
  const NodeId a = t.variable(Tensor::scalar(1.0), "a");
  const NodeId unused = t.variable(Tensor({2}, 1.0), "unused");
  const Gradients g = t.backward(ops::sum(t, ops::scale(t, a, 3.0)));
  EXPECT_EQ(g.size(), 2u);
  EXPECT_EQ(g.at(a)[0], 3.0);
  EXPECT_EQ(g.at(unused).max_abs(), 0.0);
}

TEST(Tape, NonFiniteForwardIsRejected) {
  Tape t;
  const NodeId x = t.variable(Tensor::scalar(1e300));
  EXPECT_THROW(ops::mul(t, x, x), NumericError);
}

TEST(Tape, EmbedRejectsUnknownToken) {
  Tape t;
  const NodeId table = t.variable(Tensor({3, 2}, 1.0));
  EXPECT_THROW(ops::embed(t, table, {0, 3}), std::out_of_range);
  EXPECT_THROW(ops::embed(t, table, {-1}), std::out_of_range);
}

TEST(TapeFd, Add) {
  Rng rng(10);
  expect_gradients_match_fd([](Tape& t, const auto& x) { return ops::add(t, x[0], x[1]); },
                            {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})});
}

TEST(TapeFd, AddAndMulWithRowBroadcast) {
  Rng rng(11);
  expect_gradients_match_fd(
      [](Tape& t, const auto& x) { return ops::mul(t, ops::add(t, x[0], x[1]), x[2]); },
      {random_tensor(rng, {3, 4}), random_tensor(rng, {4}), random_tensor(rng, {1, 4})});
}

TEST(TapeFd, Sub) {
  Rng rng(12);
  expect_gradients_match_fd([](Tape& t, const auto& x) { return ops::sub(t, x[0], x[1]); },
                            {random_tensor(rng, {2, 3}), random_tensor(rng, {2, 3})});
}

TEST(TapeFd, Matmul) {
  Rng rng(13);
  expect_gradients_match_fd([](Tape& t, const auto& x) { return ops::matmul(t, x[0], x[1]); },
                            {random_tensor(rng, {2, 3}), random_tensor(rng, {3, 4})});
}

TEST(TapeFd, LinearWithBias) {
  Rng rng(14);
  expect_gradients_match_fd([](Tape& t, const auto& x) { return ops::linear(t, x[0], x[1], x[2]); },
                            {random_tensor(rng, {5, 3}), random_tensor(rng, {4, 3}), random_tensor(rng, {4})});
}

TEST(TapeFd, ScaleAffine) {
  Rng rng(15);
  expect_gradients_match_fd(
      [](Tape& t, const auto& x) { return ops::affine(t, ops::scale(t, x[0], -1.5), 2.0, 0.3); },
      {random_tensor(rng, {6})});
}

TEST(TapeFd, Conv4) {
  Rng rng(16);
  expect_gradients_match_fd([](Tape& t, const auto& x) { return ops::conv4(t, x[0], x[1], 5); },
                            {random_tensor(rng, {10, 3}), random_tensor(rng, {4, 3})});
}

TEST(TapeFd, Activations) {
  Rng rng(17);
  expect_gradients_match_fd(
      [](Tape& t, const auto& x) {
        return ops::add(t, ops::add(t, ops::silu(t, x[0]), ops::sigmoid(t, x[0])),
                        ops::add(t, ops::softplus(t, x[0]), ops::tanh(t, x[0])));
      },
      {random_tensor(rng, {3, 5}, 2.0)});
}

TEST(TapeFd, RmsNormGrouped) {
  Rng rng(18);
  expect_gradients_match_fd([](Tape& t, const auto& x) { return ops::rms_norm(t, x[0], x[1], 3); },
                            {random_tensor(rng, {4, 6}), random_tensor(rng, {6})});
}

TEST(TapeFd, L2NormalizeGrouped) {
  Rng rng(19);
  expect_gradients_match_fd([](Tape& t, const auto& x) { return ops::l2_normalize(t, x[0], 2); },
                            {random_tensor(rng, {3, 6})});
}

TEST(TapeFd, SliceConcat) {
  Rng rng(20);
  expect_gradients_match_fd(
      [](Tape& t, const auto& x) {
        return ops::concat_cols(t, {ops::slice_cols(t, x[0], 3, 2), x[1], ops::slice_cols(t, x[0], 0, 1)});
      },
      {random_tensor(rng, {3, 5}), random_tensor(rng, {3, 2})});
}

TEST(TapeFd, EmbedAndCrossEntropy) {
  Rng rng(21);
  const std::vector<int> tokens{0, 2, 2, 1};
  const std::vector<int> targets{1, 0, 2, 2};
  const std::vector<double> mask{1.0, 0.0, 1.0, 1.0};
  expect_gradients_match_fd(
      [&](Tape& t, const auto& x) {
        const NodeId e = ops::embed(t, x[0], tokens);
        return ops::cross_entropy(t, ops::linear(t, e, x[1]), targets, mask);
      },
      {random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})});
}

TEST(TapeFd, ComposedGraph) {
  Rng rng(22);
  expect_gradients_match_fd(
      [](Tape& t, const auto& x) {
        const NodeId h = ops::silu(t, ops::linear(t, x[0], x[1]));
        const NodeId n = ops::rms_norm(t, h, x[2], 4);
        return ops::tanh(t, ops::matmul(t, n, x[3]));
      },
      {random_tensor(rng, {5, 3}), random_tensor(rng, {4, 3}), random_tensor(rng, {4}), random_tensor(rng, {4, 2})});
}

TEST(CrossEntropy, MaskedPositionsGetZeroGradient) {
  Rng rng(23);
  Tape t;
  const NodeId logits = t.variable(random_tensor(rng, {4, 3}));
  const Gradients g = t.backward(ops::cross_entropy(t, logits, {0, 1, 2, 0}, {1.0, 0.0, 1.0, 0.0}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(g.at(logits)(1, c), 0.0);
    EXPECT_EQ(g.at(logits)(3, c), 0.0);
    EXPECT_NE(g.at(logits)(0, c), 0.0);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  Tape t;
  const NodeId logits = t.constant(Tensor({2, 5}, 0.7));
  EXPECT_NEAR(t.value(ops::cross_entropy(t, logits, {1, 4}, {1.0, 1.0}))[0], std::log(5.0), 1e-14);
}
