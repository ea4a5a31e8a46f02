#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace loopq {

/// Dense row-major tensor of doubles. Value type: copies are deep.
///
/// Most of the library works on rank-2 tensors (matrices); row vectors are
/// 1 x n. Elementwise operations accept any rank.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }
  static Tensor full(std::size_t rows, std::size_t cols, double v) { return Tensor({rows, cols}, v); }
  static Tensor identity(std::size_t n);
  static Tensor scalar(double v) { return Tensor({1, 1}, v); }
  /// Builds a matrix from nested rows; all rows must have the same length.
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // rank-2 accessors; throw DimensionError on other ranks
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double item() const;
  bool all_finite() const noexcept;

  Tensor transposed() const;
  Tensor reshaped(Shape shape) const;

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::string shape_string(const Tensor::Shape& shape);

// Plain (non-differentiable) helpers used by oracles, statistics and kernels.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
double frobenius_norm(const Tensor& a);
double squared_norm(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
/// Row slice [begin, end) of a matrix.
Tensor row_block(const Tensor& a, std::size_t begin, std::size_t end);

}  // namespace loopq
