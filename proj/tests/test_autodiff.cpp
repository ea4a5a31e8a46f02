#include <gtest/gtest.h>

#include <cmath>

#include "loopq/autodiff.hpp"
#include "loopq/errors.hpp"
#include "support.hpp"

using namespace loopq;
using namespace loopq::testing;

TEST(Tensor, ShapeChecksAndBasics) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  const Tensor a = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_EQ(a.rows(), 2u);
  EXPECT_EQ(a.transposed()(2, 1), 6.0);
  EXPECT_EQ(matmul(a, a.transposed()), Tensor::from_rows({{14, 32}, {32, 77}}));
  EXPECT_THROW(matmul(a, a), DimensionError);
  EXPECT_DOUBLE_EQ(frobenius_norm(Tensor::from_rows({{3, 4}})), 5.0);
  EXPECT_EQ(row_block(a, 1, 2), Tensor::from_rows({{4, 5, 6}}));
}

TEST(Autodiff, OpsMatchFiniteDifferences) {
  Rng rng(7);
  std::uint64_t seed = 100;
  for (const OpCase& c : differentiable_ops()) {
    for (int k = 0; k < 4; ++k) {
      const auto x = c.inputs(rng);
      const ScalarFn f = weighted(c, x, seed++);
      EXPECT_LT(grad_check(f, x, c.n_grad), 1e-6) << c.name << " case " << k;
    }
  }
}

TEST(Autodiff, LoopedWeightGradient) {
  Rng rng(3);
  const std::vector<Tensor> x{random_tensor(rng, 3, 4), random_tensor(rng, 4, 4, 0.4)};
  EXPECT_LT(grad_check(looped_weight_fn(4, random_tensor(rng, 3, 4)), x, 2), 1e-6);
}

TEST(Autodiff, SharedSubgraphVisitedOnce) {
  // y = (a*a) + (a*a) with the product shared: dy/da = 4a.
  const Node a = Node::leaf(Tensor::scalar(3.0));
  const Node p = mul(a, a);
  backward(add(p, p));
  EXPECT_DOUBLE_EQ(a.grad().item(), 12.0);
}

TEST(Autodiff, LeafGradientsAccumulateUntilZeroed) {
  Node a = Node::leaf(Tensor::scalar(2.0));
  backward(square(a));
  backward(square(a));
  EXPECT_DOUBLE_EQ(a.grad().item(), 8.0);
  a.zero_grad();
  backward(scale(a, 5.0));
  EXPECT_DOUBLE_EQ(a.grad().item(), 5.0);
}

TEST(Autodiff, ConstantsGetNoGradient) {
  const Node c = Node::constant(Tensor::scalar(2.0));
  const Node a = Node::leaf(Tensor::scalar(1.0));
  backward(mul(a, c));
  EXPECT_FALSE(c.requires_grad());
  EXPECT_DOUBLE_EQ(a.grad().item(), 2.0);
}

TEST(Autodiff, BackwardNeedsScalarRoot) {
  const Node a = Node::leaf(Tensor::zeros(2, 2));
  EXPECT_THROW(backward(a), ContractError);
}

TEST(Autodiff, RoundTiesToEvenWithStraightThroughGradient) {
  const Node x = Node::leaf(Tensor::from_rows({{0.5, 1.5, 2.5, -0.5, -1.5, 0.4}}));
  const Node r = round_ste(x);
  EXPECT_EQ(r.value(), Tensor::from_rows({{0, 2, 2, -0, -2, 0}}));
  backward(sum(r));
  EXPECT_EQ(x.grad(), Tensor::full(1, 6, 1.0));
}

TEST(Autodiff, ClippedRoundPassesGradientOnlyInside) {
  const Node x = Node::leaf(Tensor::from_rows({{-9.0, -8.0, 0.3, 7.0, 7.2}}));
  const Node r = round_ste(x, -8.0, 7.0);
  EXPECT_EQ(r.value(), Tensor::from_rows({{-8, -8, 0, 7, 7}}));
  backward(sum(r));
  EXPECT_EQ(x.grad(), Tensor::from_rows({{0, 1, 1, 1, 0}}));
}

TEST(Autodiff, StraightThroughKeepsGradient) {
  const Node x = Node::leaf(Tensor::from_rows({{1.0, 2.0}}));
  const Node y = straight_through(x, Tensor::from_rows({{5.0, 6.0}}));
  EXPECT_EQ(y.value(), Tensor::from_rows({{5.0, 6.0}}));
  backward(sum(mul(y, Node::constant(Tensor::from_rows({{2.0, 3.0}})))));
  EXPECT_EQ(x.grad(), Tensor::from_rows({{2.0, 3.0}}));
}

TEST(Autodiff, CrossEntropyHandValue) {
  // Uniform logits over 4 classes: loss = log 4; ignored targets do not count.
  const Node z = Node::constant(Tensor::zeros(2, 4));
  const std::vector<int> t{2, -1};
  EXPECT_NEAR(cross_entropy(z, t).value().item(), std::log(4.0), 1e-15);
}

TEST(Autodiff, KlDivergenceHandValue) {
  // Two classes, temperature 1, full support: KL(p || q) for p = (0.5, 0.5), q = softmax(0, log 3) = (0.25, 0.75).
  const Tensor teacher = Tensor::zeros(1, 2);
  const Node student = Node::constant(Tensor::from_rows({{0.0, std::log(3.0)}}));
  const double expect = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  EXPECT_NEAR(kl_divergence(teacher, student, 1.0, 2).value().item(), expect, 1e-15);
  EXPECT_NEAR(kl_divergence(teacher, Node::constant(teacher), 1.0, 2).value().item(), 0.0, 1e-15);
}

TEST(Autodiff, KlTopKRenormalizes) {
  // Only the teacher's top-2 entries count; the student's third logit is irrelevant.
  const Tensor teacher = Tensor::from_rows({{2.0, 1.0, -5.0}});
  const Node a = Node::constant(Tensor::from_rows({{2.0, 1.0, 9.0}}));
  EXPECT_NEAR(kl_divergence(teacher, a, 1.0, 2).value().item(), 0.0, 1e-14);
}

TEST(Autodiff, CausalAttentionIgnoresFuture) {
  Rng rng(5);
  Tensor q = random_tensor(rng, 4, 4), k = random_tensor(rng, 4, 4), v = random_tensor(rng, 4, 4);
  const Tensor base = causal_attention(Node::constant(q), Node::constant(k), Node::constant(v), 4, 2).value();
  k(3, 0) += 5.0;
  v(3, 1) -= 3.0;
  const Tensor moved = causal_attention(Node::constant(q), Node::constant(k), Node::constant(v), 4, 2).value();
  EXPECT_EQ(row_block(base, 0, 3), row_block(moved, 0, 3));
  EXPECT_NE(row_block(base, 3, 4), row_block(moved, 3, 4));
}

TEST(Autodiff, BroadcastShapesRejected) {
  const Node a = Node::constant(Tensor::zeros(3, 4));
  EXPECT_THROW(add(a, Node::constant(Tensor::zeros(2, 4))), DimensionError);
  EXPECT_THROW(add(a, Node::constant(Tensor::zeros(1, 3))), DimensionError);
}
