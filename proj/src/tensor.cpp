#include "lbyl/tensor.hpp"

#include <cmath>
#include <string>

#include "lbyl/error.hpp"

namespace lbyl {

namespace {

std::string dims(std::size_t a, std::size_t b) {
  return std::to_string(a) + " vs " + std::to_string(b);
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::kShapeMismatch, "matrix data length " + dims(data_.size(), rows_ * cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

Matrix Matrix::transposed() const {
  Matrix out(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
  return out;
}

Tensor3::Tensor3(Shape3 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw Error(ErrorCode::kShapeMismatch, "tensor3 data length " + dims(data_.size(), shape_.numel()));
  }
}

Tensor4::Tensor4(Shape4 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw Error(ErrorCode::kShapeMismatch, "tensor4 data length " + dims(data_.size(), shape_.numel()));
  }
}

Matrix Tensor4::as_matrix() const { return Matrix(shape_.m, shape_.filter_size(), data_); }

void ensure_finite(std::span<const double> x, const char* what) {
  for (double v : x) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, what);
  }
}

Tensor3 conv2d(const Tensor3& input, const Tensor4& filters, std::size_t stride, std::size_t padding) {
  const Shape3& in = input.shape();
  const Shape4& fs = filters.shape();
  if (fs.n != in.c) {
    throw Error(ErrorCode::kShapeMismatch, "conv2d input channels " + dims(in.c, fs.n));
  }
  if (fs.k1 != fs.k2) throw Error(ErrorCode::kGeometryError, "conv2d requires square kernels");
  if (stride == 0) throw Error(ErrorCode::kGeometryError, "conv2d stride must be positive");
  const std::size_t k = fs.k1;
  const std::size_t pw = in.w + 2 * padding;
  const std::size_t ph = in.h + 2 * padding;
  if (pw < k || ph < k || (pw - k) % stride != 0 || (ph - k) % stride != 0) {
    throw Error(ErrorCode::kGeometryError, "conv2d window does not tile the padded input");
  }
  const Shape3 out_shape{fs.m, (pw - k) / stride + 1, (ph - k) / stride + 1};
  Tensor3 out(out_shape);

  const auto p = static_cast<std::ptrdiff_t>(padding);
  const auto iw = static_cast<std::ptrdiff_t>(in.w);
  const auto ih = static_cast<std::ptrdiff_t>(in.h);
  for (std::size_t o = 0; o < fs.m; ++o) {
    for (std::size_t x = 0; x < out_shape.w; ++x) {
      for (std::size_t y = 0; y < out_shape.h; ++y) {
        double acc = 0.0;
        for (std::size_t c = 0; c < in.c; ++c) {
          for (std::size_t a = 0; a < k; ++a) {
            const auto sx = static_cast<std::ptrdiff_t>(x * stride + a) - p;
            if (sx < 0 || sx >= iw) continue;
            for (std::size_t b = 0; b < k; ++b) {
              const auto sy = static_cast<std::ptrdiff_t>(y * stride + b) - p;
              if (sy < 0 || sy >= ih) continue;
              acc += input.at(c, static_cast<std::size_t>(sx), static_cast<std::size_t>(sy)) *
                     filters.at(o, c, a, b);
            }
          }
        }
        out.at(o, x, y) = acc;
      }
    }
  }
  ensure_finite(out.values(), "conv2d output");
  return out;
}

Tensor4 mode1_product(const Tensor4& filters, const Matrix& st) {
  const Shape4& fs = filters.shape();
  if (st.cols() != fs.m) {
    throw Error(ErrorCode::kShapeMismatch, "mode1 selector cols " + dims(st.cols(), fs.m));
  }
  Tensor4 out(Shape4{st.rows(), fs.n, fs.k1, fs.k2});
  const std::size_t len = fs.filter_size();
  for (std::size_t a = 0; a < st.rows(); ++a) {
    auto dst = out.filter(a);
    for (std::size_t i = 0; i < fs.m; ++i) {
      const double coef = st(a, i);
      auto src = filters.filter(i);
      for (std::size_t e = 0; e < len; ++e) dst[e] += coef * src[e];
    }
  }
  return out;
}

Tensor4 mode2_product(const Tensor4& filters, const Matrix& st) {
  const Shape4& fs = filters.shape();
  if (st.cols() != fs.n) {
    throw Error(ErrorCode::kShapeMismatch, "mode2 selector cols " + dims(st.cols(), fs.n));
  }
  Tensor4 out(Shape4{fs.m, st.rows(), fs.k1, fs.k2});
  const std::size_t kk = fs.k1 * fs.k2;
  for (std::size_t o = 0; o < fs.m; ++o) {
    for (std::size_t a = 0; a < st.rows(); ++a) {
      double* dst = &out.at(o, a, 0, 0);
      for (std::size_t i = 0; i < fs.n; ++i) {
        const double coef = st(a, i);
        const double* src = filters.filter(o).data() + i * kk;
        for (std::size_t e = 0; e < kk; ++e) dst[e] += coef * src[e];
      }
    }
  }
  return out;
}

Vector spd_solve(const Matrix& a, const Vector& b) {
  const std::size_t t = a.rows();
  if (a.cols() != t || b.size() != t) {
    throw Error(ErrorCode::kShapeMismatch, "spd_solve system is " + std::to_string(a.rows()) + "x" +
                                               std::to_string(a.cols()) + " with rhs " +
                                               std::to_string(b.size()));
  }
  if (t == 0) throw Error(ErrorCode::kShapeMismatch, "spd_solve on an empty system");
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) {
      const double scale = std::max(std::abs(a(i, j)), std::abs(a(j, i)));
      if (std::abs(a(i, j) - a(j, i)) > 1e-12 * scale) {
        throw Error(ErrorCode::kAsymmetricInput,
                    "entry (" + std::to_string(i) + "," + std::to_string(j) + ") differs from its transpose");
      }
    }
  }

  // Lower-triangular factor, a = L L^T.
  Matrix l(t, t);
  for (std::size_t j = 0; j < t; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) {
      throw Error(ErrorCode::kNotPositiveDefinite,
                  "non-positive pivot at column " + std::to_string(j) + " (set lambda2 > 0)");
    }
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < t; ++i) {
      double v = a(i, j);
      for (std::size_t k = 0; k < j; ++k) v -= l(i, k) * l(j, k);
      l(i, j) = v / ljj;
    }
  }

  Vector z(t);
  for (std::size_t i = 0; i < t; ++i) {
    double v = b[i];
    for (std::size_t k = 0; k < i; ++k) v -= l(i, k) * z[k];
    z[i] = v / l(i, i);
  }
  Vector x(t);
  for (std::size_t ii = t; ii-- > 0;) {
    double v = z[ii];
    for (std::size_t k = ii + 1; k < t; ++k) v -= l(k, ii) * x[k];
    x[ii] = v / l(ii, ii);
  }
  ensure_finite(x.values(), "spd_solve solution");
  return x;
}

double norm(std::span<const double> x, NormOrder order) {
  double acc = 0.0;
  if (order == NormOrder::kL1) {
    for (double v : x) acc += std::abs(v);
    return acc;
  }
  for (double v : x) acc += v * v;
  return std::sqrt(acc);
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::kShapeMismatch, "dot lengths " + dims(a.size(), b.size()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw Error(ErrorCode::kShapeMismatch, "matmul inner dims " + dims(a.cols(), b.rows()));
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double v = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += v * b(k, j);
    }
  return out;
}

Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) throw Error(ErrorCode::kShapeMismatch, "matvec dims " + dims(a.cols(), x.size()));
  Vector out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = dot(a.row(i), x.values());
  return out;
}

}  // namespace lbyl
