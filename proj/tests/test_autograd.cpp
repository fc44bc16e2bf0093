// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "grad_cases.hpp"
#include "sella/autograd.hpp"
#include "sella/errors.hpp"
#include "sella/optim.hpp"

namespace sella {
namespace {

using testing::primitive_grad_cases;

TEST(Tensor, FactoriesAndAccess) {
  Tensor z = Tensor::zeros(2, 3);
  EXPECT_EQ(z.rows(), 2u);
  EXPECT_EQ(z.cols(), 3u);
  Tensor i = Tensor::identity(3);
  EXPECT_EQ(i(1, 1), 1.0);
  EXPECT_EQ(i(1, 2), 0.0);
  EXPECT_EQ(Tensor::scalar(4.5).item(), 4.5);
  EXPECT_THROW(Tensor::zeros(2, 2).item(), ContractViolation);
}

TEST(Tensor, DumpRoundTripIsExact) {
  std::mt19937_64 rng(3);
  Tensor t = testing::uniform(4, 7, rng, -1e3, 1e3);
  t(0, 0) = 1e-300;
  std::stringstream ss;
  write_tensor(ss, t);
  EXPECT_EQ(read_tensor(ss), t);
}

TEST(Tensor, DumpHeaderNamesShape) {
  std::stringstream ss;
  write_tensor(ss, Tensor::zeros(2, 5));
  std::string header;
  std::getline(ss, header);
  EXPECT_EQ(header, "shape: 2 5");
}

TEST(Autograd, MatmulMatchesHandComputation) {
  Graph g;
  NodeId a = g.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  NodeId b = g.constant(Tensor({2, 1}, {5, 6}));
  EXPECT_EQ(g.value(g.matmul(a, b)), Tensor({2, 1}, {17, 39}));
}

TEST(Autograd, ShapeMismatchIsContractViolation) {
  Graph g;
  NodeId a = g.constant(Tensor::zeros(2, 3));
  NodeId b = g.constant(Tensor::zeros(2, 3));
  EXPECT_THROW(g.matmul(a, b), ContractViolation);
  EXPECT_THROW(g.add(a, g.constant(Tensor::zeros(3, 3))), ContractViolation);
}

TEST(Autograd, NonFiniteOutputIsRejected) {
  Graph g;
  NodeId z = g.constant(Tensor::zeros(1, 1));
  EXPECT_THROW(g.log(z), NumericError);
  EXPECT_THROW(g.exp(g.constant(Tensor::full(1, 1, 1e4))), NumericError);
}

TEST(Autograd, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(1);
  Graph g;
  const Tensor s = g.value(g.row_softmax(g.constant(testing::uniform(4, 6, rng, -30, 30))));
  for (std::size_t r = 0; r < 4; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 6; ++c) total += s(r, c);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Autograd, CausalSoftmaxZeroesFuture) {
  std::mt19937_64 rng(2);
  Graph g;
  const Tensor s = g.value(g.causal_softmax(g.constant(testing::uniform(5, 5, rng))));
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      if (c > r) {
        EXPECT_EQ(s(r, c), 0.0);
      }
      total += s(r, c);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Autograd, LayerNormStandardizesRows) {
  std::mt19937_64 rng(4);
  Graph g;
  const Tensor y = g.value(g.layer_norm(g.constant(testing::uniform(3, 8, rng, -5, 5)),
                                        g.constant(Tensor::full(1, 8, 1.0)), g.constant(Tensor::zeros(1, 8))));
  for (std::size_t r = 0; r < 3; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += y(r, c) / 8;
    for (std::size_t c = 0; c < 8; ++c) var += (y(r, c) - mean) * (y(r, c) - mean) / 8;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-3);  // eps in the denominator
  }
}

TEST(Autograd, GeluTanhForm) {
  Graph g;
  const double x = 0.7;
  const double expected =
      0.5 * x * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
  EXPECT_DOUBLE_EQ(g.value(g.gelu(g.constant(Tensor::scalar(x)))).item(), expected);
}

TEST(Autograd, CosineSimilarityOfZeroRowIsAnError) {
  Graph g;
  EXPECT_THROW(g.cosine_similarity(g.constant(Tensor::zeros(1, 3)), g.constant(Tensor::full(1, 3, 1.0))), Error);
}

TEST(Autograd, FrozenParameterReceivesNoGradient) {
  Parameter frozen{"w", Tensor::full(2, 2, 0.5), false};
  Parameter live{"v", Tensor::full(2, 2, 0.25), true};
  Graph g;
  NodeId loss = g.sum(g.mul(g.parameter(frozen), g.parameter(live)));
  Gradients grads = g.backward(loss);
  EXPECT_EQ(grads.find(frozen), nullptr);
  ASSERT_NE(grads.find(live), nullptr);
  EXPECT_EQ(*grads.find(live), Tensor::full(2, 2, 0.5));
}

TEST(Autograd, UnusedTrainableLeafGetsZeros) {
  Parameter used{"a", Tensor::full(1, 2, 1.0), true};
  Parameter unused{"b", Tensor::full(1, 3, 1.0), true};
  Graph g;
  g.parameter(unused);
  Gradients grads = g.backward(g.sum(g.parameter(used)));
  ASSERT_NE(grads.find(unused), nullptr);
  EXPECT_EQ(*grads.find(unused), Tensor::zeros(1, 3));
}

TEST(Autograd, ScatterRowsReplacesOnlyTargets) {
  Graph g;
  NodeId base = g.constant(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}));
  NodeId rows = g.constant(Tensor({1, 2}, {9, 9}));
  EXPECT_EQ(g.value(g.scatter_rows(base, rows, {1})), Tensor({3, 2}, {1, 2, 9, 9, 5, 6}));
}

class PrimitiveGrad : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGrad, CentralDifferencesAgree) {
  const auto cases = primitive_grad_cases();
  const auto& c = cases.at(GetParam());
  for (std::uint64_t seed = 0; seed < 3; ++seed) EXPECT_LE(c.run(seed), 1e-4) << c.name << " seed " << seed;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGrad, ::testing::Range<std::size_t>(0, primitive_grad_cases().size()),
                         [](const auto& info) { return primitive_grad_cases()[info.param].name; });

TEST(Adam, StepsOnlyTrainableParameters) {
  Parameter a{"a", Tensor::full(1, 2, 1.0), true};
  Parameter b{"b", Tensor::full(1, 2, 1.0), false};
  Adam opt(AdamConfig{.lr = 0.1}, {&a, &b});
  Graph g;
  GradAccumulator acc;
  acc.add(g.backward(g.sum(g.mul(g.parameter(a), g.parameter(b)))));
  opt.step(acc);
  // First Adam step moves each entry by lr * sign(grad).
  EXPECT_NEAR(a.value(0, 0), 0.9, 1e-7);
  EXPECT_EQ(b.value, Tensor::full(1, 2, 1.0));
}

TEST(Adam, MinimizesQuadratic) {
  Parameter x{"x", Tensor({1, 2}, {3.0, -2.0}), true};
  Adam opt(AdamConfig{.lr = 0.05}, {&x});
  for (int i = 0; i < 2000; ++i) {
    Graph g;
    NodeId p = g.parameter(x);
    GradAccumulator acc;
    acc.add(g.backward(g.sum(g.mul(p, p))));
    opt.step(acc);
  }
  EXPECT_NEAR(x.value(0, 0), 0.0, 1e-2);
  EXPECT_NEAR(x.value(0, 1), 0.0, 1e-2);
}

}  // namespace
}  // namespace sella
