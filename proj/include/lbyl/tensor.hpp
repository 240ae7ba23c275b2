#pragma once

// Dense row-major containers and the numerical kernels shared by every
// other part of the library. Everything is 64-bit floating point.

#include <cstddef>
#include <span>
#include <vector>

namespace lbyl {

class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t len, double fill = 0.0) : data_(len, fill) {}
  explicit Vector(std::vector<double> data) : data_(std::move(data)) {}

  std::size_t size() const noexcept { return data_.size(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& raw() const noexcept { return data_; }

  bool operator==(const Vector&) const = default;

 private:
  std::vector<double> data_;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  /// Throws ShapeMismatch if data.size() != rows * cols.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  Matrix transposed() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct Shape3 {
  std::size_t c = 0;
  std::size_t w = 0;
  std::size_t h = 0;

  std::size_t numel() const noexcept { return c * w * h; }
  bool operator==(const Shape3&) const = default;
};

/// Feature map: channels x width x height.
class Tensor3 {
 public:
  Tensor3() = default;
  explicit Tensor3(Shape3 shape, double fill = 0.0) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor3(Shape3 shape, std::vector<double> data);

  const Shape3& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& at(std::size_t c, std::size_t x, std::size_t y) {
    return data_[(c * shape_.w + x) * shape_.h + y];
  }
  double at(std::size_t c, std::size_t x, std::size_t y) const {
    return data_[(c * shape_.w + x) * shape_.h + y];
  }

  std::span<double> channel(std::size_t c) {
    return {data_.data() + c * shape_.w * shape_.h, shape_.w * shape_.h};
  }
  std::span<const double> channel(std::size_t c) const {
    return {data_.data() + c * shape_.w * shape_.h, shape_.w * shape_.h};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool operator==(const Tensor3&) const = default;

 private:
  Shape3 shape_;
  std::vector<double> data_;
};

struct Shape4 {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t k1 = 0;
  std::size_t k2 = 0;

  std::size_t numel() const noexcept { return m * n * k1 * k2; }
  std::size_t filter_size() const noexcept { return n * k1 * k2; }
  bool operator==(const Shape4&) const = default;
};

/// Filter bank: filters x input channels x kernel width x kernel height.
class Tensor4 {
 public:
  Tensor4() = default;
  explicit Tensor4(Shape4 shape, double fill = 0.0) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor4(Shape4 shape, std::vector<double> data);

  const Shape4& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& at(std::size_t o, std::size_t i, std::size_t a, std::size_t b) {
    return data_[((o * shape_.n + i) * shape_.k1 + a) * shape_.k2 + b];
  }
  double at(std::size_t o, std::size_t i, std::size_t a, std::size_t b) const {
    return data_[((o * shape_.n + i) * shape_.k1 + a) * shape_.k2 + b];
  }

  /// The vectorized o-th filter (length n * k1 * k2).
  std::span<double> filter(std::size_t o) {
    return {data_.data() + o * shape_.filter_size(), shape_.filter_size()};
  }
  std::span<const double> filter(std::size_t o) const {
    return {data_.data() + o * shape_.filter_size(), shape_.filter_size()};
  }

  /// View as an m x (n*k1*k2) matrix, one vectorized filter per row.
  Matrix as_matrix() const;

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool operator==(const Tensor4&) const = default;

 private:
  Shape4 shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Kernels

/// Zero-padded cross-correlation without bias.
Tensor3 conv2d(const Tensor3& input, const Tensor4& filters, std::size_t stride, std::size_t padding);

/// out[a,:,:,:] = sum_i st(a,i) * filters[i,:,:,:]
Tensor4 mode1_product(const Tensor4& filters, const Matrix& st);

/// out[:,a,:,:] = sum_i st(a,i) * filters[:,i,:,:]
Tensor4 mode2_product(const Tensor4& filters, const Matrix& st);

/// Dense Cholesky solve of a symmetric positive definite system.
/// Throws AsymmetricInput or NotPositiveDefinite.
Vector spd_solve(const Matrix& a, const Vector& b);

enum class NormOrder { kL1, kL2 };

double norm(std::span<const double> x, NormOrder order);
inline double norm(const Vector& x, NormOrder order) { return norm(x.values(), order); }
inline double norm(const Matrix& x, NormOrder order) { return norm(x.values(), order); }
inline double norm(const Tensor3& x, NormOrder order) { return norm(x.values(), order); }
inline double norm(const Tensor4& x, NormOrder order) { return norm(x.values(), order); }

double dot(std::span<const double> a, std::span<const double> b);

Matrix matmul(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, const Vector& x);

/// Throws NonFinite naming `what` if any entry is NaN or infinite.
void ensure_finite(std::span<const double> x, const char* what);

}  // namespace lbyl
