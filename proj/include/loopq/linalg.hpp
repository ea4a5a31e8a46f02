#pragma once

#include <cstdint>
#include <random>

#include "loopq/tensor.hpp"

namespace loopq {

/// Deterministic generator. std::mt19937_64 is fully specified by the
/// standard but the std distributions are not, so the uniform and Gaussian
/// (Box-Muller) transforms are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  Tensor normal_matrix(std::size_t rows, std::size_t cols, double stddev);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Haar-distributed orthogonal d x d matrix: QR of a Gaussian matrix with the
/// sign of diag(R) folded into Q.
Tensor random_orthogonal(std::size_t d, std::uint64_t seed);

Tensor inverse(const Tensor& a);
/// 2-norm condition number sigma_max / sigma_min (infinity for singular input).
double condition_number(const Tensor& a);
Tensor kron(const Tensor& a, const Tensor& b);
/// Eigenpairs of a symmetric matrix, eigenvalues ascending; eigenvectors are columns.
void symmetric_eigen(const Tensor& a, Tensor& eigenvalues, Tensor& eigenvectors);

}  // namespace loopq
