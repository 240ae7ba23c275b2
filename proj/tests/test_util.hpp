#pragma once

// Random instance generators and naive reference implementations used as
// oracles. Oracles here are written from the mathematical definitions and
// share no code with the library kernels they check.

#include <cmath>
#include <functional>
#include <span>
#include <random>
#include <vector>

#include "doctest.h"
#include "lbyl/error.hpp"
#include "lbyl/network.hpp"
#include "lbyl/tensor.hpp"

namespace testutil {

using lbyl::Matrix;
using lbyl::Shape3;
using lbyl::Shape4;
using lbyl::Tensor3;
using lbyl::Tensor4;
using lbyl::Vector;

/// Runs fn and returns the code of the lbyl::Error it throws.
inline lbyl::ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const lbyl::Error& e) {
    return e.code();
  }
  FAIL("expected an lbyl::Error");
  return lbyl::ErrorCode::kConfig;
}

inline double gauss(std::mt19937_64& rng, double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng); }

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline Tensor3 random_tensor3(std::mt19937_64& rng, Shape3 s) {
  Tensor3 t(s);
  for (double& v : t.values()) v = gauss(rng);
  return t;
}

inline Tensor4 random_tensor4(std::mt19937_64& rng, Shape4 s) {
  Tensor4 t(s);
  for (double& v : t.values()) v = gauss(rng);
  return t;
}

inline Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& v : m.values()) v = gauss(rng);
  return m;
}

inline lbyl::BatchNormParams random_bn(std::mt19937_64& rng, std::size_t m) {
  lbyl::BatchNormParams bn;
  for (std::size_t i = 0; i < m; ++i) {
    bn.gamma.push_back(uniform(rng, 0.5, 1.5));
    bn.beta.push_back(gauss(rng, 0.3));
    bn.mu.push_back(gauss(rng, 0.3));
    bn.sigma.push_back(uniform(rng, 0.5, 1.5));
  }
  return bn;
}

/// Materializes the zero-padded input, then runs the textbook six loops.
inline Tensor3 naive_conv(const Tensor3& in, const Tensor4& f, std::size_t stride, std::size_t pad) {
  const Shape3 is = in.shape();
  const Shape4 fs = f.shape();
  const std::size_t pw = is.w + 2 * pad;
  const std::size_t ph = is.h + 2 * pad;
  std::vector<double> padded(is.c * pw * ph, 0.0);
  for (std::size_t c = 0; c < is.c; ++c)
    for (std::size_t x = 0; x < is.w; ++x)
      for (std::size_t y = 0; y < is.h; ++y) padded[(c * pw + x + pad) * ph + y + pad] = in.at(c, x, y);
  const std::size_t ow = (pw - fs.k1) / stride + 1;
  const std::size_t oh = (ph - fs.k2) / stride + 1;
  Tensor3 out(Shape3{fs.m, ow, oh});
  for (std::size_t o = 0; o < fs.m; ++o)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t y = 0; y < oh; ++y) {
        double acc = 0.0;
        for (std::size_t c = 0; c < fs.n; ++c)
          for (std::size_t a = 0; a < fs.k1; ++a)
            for (std::size_t b = 0; b < fs.k2; ++b)
              acc += padded[(c * pw + x * stride + a) * ph + y * stride + b] * f.at(o, c, a, b);
        out.at(o, x, y) = acc;
      }
  return out;
}

inline Tensor4 naive_mode1(const Tensor4& f, const Matrix& st) {
  const Shape4 fs = f.shape();
  Tensor4 out(Shape4{st.rows(), fs.n, fs.k1, fs.k2});
  for (std::size_t a = 0; a < st.rows(); ++a)
    for (std::size_t j = 0; j < fs.n; ++j)
      for (std::size_t x = 0; x < fs.k1; ++x)
        for (std::size_t y = 0; y < fs.k2; ++y) {
          double acc = 0.0;
          for (std::size_t i = 0; i < fs.m; ++i) acc += st(a, i) * f.at(i, j, x, y);
          out.at(a, j, x, y) = acc;
        }
  return out;
}

inline Tensor4 naive_mode2(const Tensor4& f, const Matrix& st) {
  const Shape4 fs = f.shape();
  Tensor4 out(Shape4{fs.m, st.rows(), fs.k1, fs.k2});
  for (std::size_t o = 0; o < fs.m; ++o)
    for (std::size_t a = 0; a < st.rows(); ++a)
      for (std::size_t x = 0; x < fs.k1; ++x)
        for (std::size_t y = 0; y < fs.k2; ++y) {
          double acc = 0.0;
          for (std::size_t i = 0; i < fs.n; ++i) acc += st(a, i) * f.at(o, i, x, y);
          out.at(o, a, x, y) = acc;
        }
  return out;
}

/// Gaussian elimination with partial pivoting on a dense copy.
inline std::vector<double> gauss_solve(const Matrix& a, const std::vector<double>& b) {
  const std::size_t n = a.rows();
  std::vector<std::vector<double>> m(n, std::vector<double>(n + 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m[i][j] = a(i, j);
    m[i][n] = b[i];
  }
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    std::swap(m[piv], m[col]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = m[r][col] / m[col][col];
      for (std::size_t c = col; c <= n; ++c) m[r][c] -= f * m[col][c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double acc = m[i][n];
    for (std::size_t j = i + 1; j < n; ++j) acc -= m[i][j] * x[j];
    x[i] = acc / m[i][i];
  }
  return x;
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

inline double max_rel_diff(std::span<const double> a, std::span<const double> b) {
  double scale = 0.0;
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / std::max(scale, 1e-300);
}

/// Direct evaluation of the restoration loss from raw weights and BN
/// parameters, without any basis object.
inline double direct_loss(const Matrix& bank, const lbyl::BatchNormParams& bn, std::size_t j,
                          const std::vector<std::size_t>& kept, const std::vector<double>& s, double l1,
                          double l2) {
  const std::size_t d = bank.cols();
  double re = 0.0;
  for (std::size_t e = 0; e < d; ++e) {
    double r = bank(j, e);
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const std::size_t i = kept[k];
      r -= s[k] * (bn.sigma[j] * bn.gamma[i]) / (bn.gamma[j] * bn.sigma[i]) * bank(i, e);
    }
    re += r * r;
  }
  double sp = 0.0;
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const std::size_t i = kept[k];
    const double pi = (bn.sigma[j] * bn.gamma[i]) / (bn.gamma[j] * bn.sigma[i]) *
                      (bn.mu[i] - bn.sigma[i] / bn.gamma[i] * bn.beta[i]);
    sp += s[k] * pi;
  }
  const double be = (bn.gamma[j] / bn.sigma[j]) * (sp - bn.mu[j] + bn.sigma[j] / bn.gamma[j] * bn.beta[j]);
  double ss = 0.0;
  for (double v : s) ss += v * v;
  return re + l1 * be * be + l2 * ss;
}

/// Plain gradient descent on direct_loss with step 1/L, where L bounds the
/// Hessian's largest eigenvalue via its Frobenius norm. The objective is an
/// unconstrained convex quadratic, so no projection step is needed.
inline std::vector<double> gd_minimize(const Matrix& bank, const lbyl::BatchNormParams& bn, std::size_t j,
                                       const std::vector<std::size_t>& kept, double l1, double l2,
                                       std::size_t max_iter = 2000000, double tol = 1e-13) {
  const std::size_t t = kept.size();
  const std::size_t d = bank.cols();
  // Assemble the quadratic form directly: loss = s'Hs/2 - g's + const.
  std::vector<double> scale(t), p(t);
  for (std::size_t k = 0; k < t; ++k) {
    const std::size_t i = kept[k];
    scale[k] = (bn.sigma[j] * bn.gamma[i]) / (bn.gamma[j] * bn.sigma[i]);
    p[k] = scale[k] * (bn.mu[i] - bn.sigma[i] / bn.gamma[i] * bn.beta[i]);
  }
  const double c = bn.gamma[j] / bn.sigma[j];
  const double target = c * bn.mu[j] - bn.beta[j];
  std::vector<double> h(t * t, 0.0), g(t, 0.0);
  for (std::size_t a = 0; a < t; ++a) {
    for (std::size_t b = 0; b < t; ++b) {
      double xx = 0.0;
      for (std::size_t e = 0; e < d; ++e) xx += scale[a] * bank(kept[a], e) * scale[b] * bank(kept[b], e);
      h[a * t + b] = 2.0 * (xx + l1 * c * c * p[a] * p[b] + (a == b ? l2 : 0.0));
    }
    double xy = 0.0;
    for (std::size_t e = 0; e < d; ++e) xy += scale[a] * bank(kept[a], e) * bank(j, e);
    g[a] = 2.0 * (xy + l1 * c * p[a] * target);
  }
  double lip = 0.0;
  for (double v : h) lip += v * v;
  lip = std::sqrt(lip);
  std::vector<double> s(t, 0.0), grad(t);
  for (std::size_t it = 0; it < max_iter; ++it) {
    double gn = 0.0;
    for (std::size_t a = 0; a < t; ++a) {
      double acc = -g[a];
      for (std::size_t b = 0; b < t; ++b) acc += h[a * t + b] * s[b];
      grad[a] = acc;
      gn += acc * acc;
    }
    if (std::sqrt(gn) < tol) break;
    for (std::size_t a = 0; a < t; ++a) s[a] -= grad[a] / lip;
  }
  return s;
}

}  // namespace testutil
