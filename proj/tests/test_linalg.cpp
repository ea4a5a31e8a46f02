#include <gtest/gtest.h>

#include "loopq/errors.hpp"
#include "loopq/linalg.hpp"
#include "support.hpp"

using namespace loopq;
using namespace loopq::testing;

TEST(Rng, DeterministicPerSeed) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 5; ++i) {
    const double x = a.normal();
    EXPECT_EQ(x, b.normal());
    EXPECT_NE(x, c.normal());
  }
}

TEST(Rng, UniformAndNormalMoments) {
  Rng r(1);
  double su = 0, sn = 0, sn2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 0.005);
  EXPECT_NEAR(sn / n, 0.0, 0.01);
  EXPECT_NEAR(sn2 / n, 1.0, 0.01);
}

TEST(Linalg, InverseAndCondition) {
  const Tensor a = Tensor::from_rows({{4, 7}, {2, 6}});
  EXPECT_LT(max_abs_diff(inverse(a), Tensor::from_rows({{0.6, -0.7}, {-0.2, 0.4}})), 1e-15);
  EXPECT_NEAR(condition_number(Tensor::from_rows({{3, 0}, {0, 0.5}})), 6.0, 1e-12);
  EXPECT_TRUE(std::isinf(condition_number(Tensor::from_rows({{1, 2}, {2, 4}}))));
}

TEST(Linalg, KronHandValue) {
  const Tensor a = Tensor::from_rows({{1, 2}});
  const Tensor b = Tensor::from_rows({{0, 1}, {1, 0}});
  EXPECT_EQ(kron(a, b), Tensor::from_rows({{0, 1, 0, 2}, {1, 0, 2, 0}}));
}

TEST(Linalg, KronMixedProductProperty) {
  // (A (x) B)(C (x) D) = AC (x) BD
  Rng r(2);
  const Tensor A = random_tensor(r, 2, 3), B = random_tensor(r, 3, 2), C = random_tensor(r, 3, 2),
               D = random_tensor(r, 2, 4);
  EXPECT_LT(max_abs_diff(matmul(kron(A, B), kron(C, D)), kron(matmul(A, C), matmul(B, D))), 1e-12);
}

TEST(Linalg, RandomOrthogonalIsOrthogonal) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor q = random_orthogonal(7, s);
    EXPECT_LT(max_abs_diff(matmul(q, q.transposed()), Tensor::identity(7)), 1e-12);
  }
  EXPECT_EQ(random_orthogonal(5, 3), random_orthogonal(5, 3));
}

TEST(Linalg, SymmetricEigenReconstructs) {
  Rng r(4);
  const Tensor x = random_tensor(r, 5, 5);
  const Tensor s = matmul(x, x.transposed());
  Tensor vals, vecs;
  symmetric_eigen(s, vals, vecs);
  Tensor lam = Tensor::zeros(5, 5);
  for (std::size_t i = 0; i < 5; ++i) lam(i, i) = vals[i];
  for (std::size_t i = 1; i < 5; ++i) EXPECT_LE(vals[i - 1], vals[i]);
  EXPECT_LT(max_abs_diff(matmul(matmul(vecs, lam), vecs.transposed()), s), 1e-10);
}
