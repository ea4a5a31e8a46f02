#include "loopq/linalg.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>

#include "loopq/errors.hpp"

namespace loopq {

namespace {
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
Eigen::Map<const RowMajor> view(const Tensor& t) { return {t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }
Eigen::Map<RowMajor> view(Tensor& t) { return {t.data().data(), Eigen::Index(t.rows()), Eigen::Index(t.cols())}; }
}  // namespace

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ContractError("Rng::below(0)");
  return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

Tensor Rng::normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
  Tensor t({rows, cols});
  for (double& v : t.data()) v = stddev * normal();
  return t;
}

Tensor random_orthogonal(std::size_t d, std::uint64_t seed) {
  if (d == 0) throw ContractError("random_orthogonal: d must be >= 1");
  Rng rng(seed);
  Tensor g = rng.normal_matrix(d, d, 1.0);
  Eigen::HouseholderQR<RowMajor> qr(view(g));
  RowMajor q = qr.householderQ();
  RowMajor r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(d); ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  Tensor out({d, d});
  view(out) = q;
  return out;
}

Tensor inverse(const Tensor& a) {
  if (a.rows() != a.cols()) throw DimensionError("inverse of non-square matrix");
  Eigen::PartialPivLU<RowMajor> lu(view(a));
  if (lu.determinant() == 0.0 || !std::isfinite(lu.determinant())) throw NumericError("inverse: singular matrix");
  Tensor out(a.shape());
  view(out) = lu.inverse();
  return out;
}

double condition_number(const Tensor& a) {
  Eigen::JacobiSVD<RowMajor> svd(view(a));
  const auto& s = svd.singularValues();
  if (s.size() == 0) return 1.0;
  const double smin = s(s.size() - 1);
  if (smin == 0.0) return std::numeric_limits<double>::infinity();
  return s(0) / smin;
}

Tensor kron(const Tensor& a, const Tensor& b) {
  const std::size_t p = a.rows(), q = a.cols(), r = b.rows(), s = b.cols();
  Tensor out({p * r, q * s});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j)
      for (std::size_t k = 0; k < r; ++k)
        for (std::size_t l = 0; l < s; ++l) out(i * r + k, j * s + l) = a(i, j) * b(k, l);
  return out;
}

void symmetric_eigen(const Tensor& a, Tensor& eigenvalues, Tensor& eigenvectors) {
  Eigen::SelfAdjointEigenSolver<RowMajor> es(view(a));
  const auto n = static_cast<std::size_t>(a.rows());
  eigenvalues = Tensor({1, n});
  eigenvectors = Tensor({n, n});
  for (std::size_t i = 0; i < n; ++i) eigenvalues[i] = es.eigenvalues()(Eigen::Index(i));
  view(eigenvectors) = es.eigenvectors();
}

}  // namespace loopq
