#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "acg/counters.hpp"

namespace acg {

// Stand-in for -inf in additive attention masks. Large enough that
// exp(score + sentinel - max) is a hard zero, finite so max subtraction
// never produces NaN.
inline constexpr double kMaskSentinel = -1e9;

// Row-major dense matrix. Default scalar is float; tolerance-tight tests run
// the same code instantiated with double.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, T(0)) {}

  T& at(std::size_t i, std::size_t j) {
    assert(i < rows && j < cols);
    return data[i * cols + j];
  }
  const T& at(std::size_t i, std::size_t j) const {
    assert(i < rows && j < cols);
    return data[i * cols + j];
  }

  T* row_ptr(std::size_t i) { return data.data() + i * cols; }
  const T* row_ptr(std::size_t i) const { return data.data() + i * cols; }
  std::span<T> row(std::size_t i) { return {row_ptr(i), cols}; }
  std::span<const T> row(std::size_t i) const { return {row_ptr(i), cols}; }

  void append_row(std::span<const T> r) {
    assert(cols == 0 || r.size() == cols);
    if (cols == 0) cols = r.size();
    data.insert(data.end(), r.begin(), r.end());
    ++rows;
  }

  bool all_finite() const {
    for (const T v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Matrix&) const = default;
};

template <typename T>
void ensure_finite(const Matrix<T>& m, const std::string& what) {
  if (!m.all_finite()) throw std::runtime_error(what + ": non-finite entries");
}

template <typename T>
void ensure_finite(std::span<const T> v, const std::string& what) {
  for (const T x : v)
    if (!std::isfinite(x)) throw std::runtime_error(what + ": non-finite entries");
}

// Additive per-key attention bias: 0 keeps a key, kMaskSentinel drops it.
template <typename T>
struct RowMask {
  std::vector<T> bias;

  static RowMask none(std::size_t len) { return RowMask{std::vector<T>(len, T(0))}; }

  std::size_t size() const { return bias.size(); }
  bool masked(std::size_t j) const { return bias[j] != T(0); }
  void mask_at(std::size_t j) { bias[j] = T(kMaskSentinel); }

  bool any_unmasked() const {
    for (const T b : bias)
      if (b == T(0)) return true;
    return false;
  }
};

// Rows of one attention head inside a wider row-major buffer.
template <typename T>
struct StridedRows {
  const T* base = nullptr;
  std::size_t stride = 0;
  std::size_t count = 0;
  std::size_t width = 0;

  const T* row(std::size_t i) const { return base + i * stride; }
};

template <typename T>
StridedRows<T> strided_rows(const Matrix<T>& m) {
  return {m.data.data(), m.cols, m.rows, m.cols};
}

// ---------------------------------------------------------------------------
// Matmul. One fixed k-major accumulation order shared by every matmul-shaped
// product in the project, so cached/uncached and serial/parallel paths agree
// bitwise.

template <typename T>
void row_times_matrix(std::span<const T> x, const Matrix<T>& b, T* out) {
  assert(x.size() == b.rows);
  std::fill(out, out + b.cols, T(0));
  for (std::size_t k = 0; k < b.rows; ++k) {
    const T xk = x[k];
    const T* brow = b.row_ptr(k);
    for (std::size_t j = 0; j < b.cols; ++j) out[j] += xk * brow[j];
  }
  counters::add_macs(std::uint64_t(b.rows) * b.cols);
}

template <typename T>
std::vector<T> row_times_matrix(std::span<const T> x, const Matrix<T>& b) {
  if (x.size() != b.rows)
    throw std::invalid_argument("row_times_matrix: dimension mismatch");
  std::vector<T> out(b.cols);
  row_times_matrix(x, b, out.data());
  return out;
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: dimension mismatch");
  Matrix<T> c(a.rows, b.cols);
  const std::ptrdiff_t m = std::ptrdiff_t(a.rows);
#pragma omp parallel for schedule(static) if (m > 1 && a.cols * b.cols >= 4096)
  for (std::ptrdiff_t i = 0; i < m; ++i)
    row_times_matrix(a.row(std::size_t(i)), b, c.row_ptr(std::size_t(i)));
  return c;
}

// Serial reference for the OpenMP matmul; same per-row kernel. Kept for
// tests and the kernel benchmark.
template <typename T>
Matrix<T> matmul_serial(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: dimension mismatch");
  Matrix<T> c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    row_times_matrix(a.row(i), b, c.row_ptr(i));
  return c;
}

// ---------------------------------------------------------------------------
// Vector helpers.

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T norm2(std::span<const T> v) {
  T acc = T(0);
  for (const T x : v) acc += x * x;
  return std::sqrt(acc);
}

// Removes the component of v along a unit direction. u_hat must already be
// normalized; the guidance correction has its own epsilon-guarded variant.
template <typename T>
std::vector<T> project_out(std::span<const T> v, std::span<const T> u_hat) {
  if (v.size() != u_hat.size()) throw std::invalid_argument("project_out: length mismatch");
  const T n = norm2(u_hat);
  if (!(n >= T(1) - T(1e-4) && n <= T(1) + T(1e-4)))
    throw std::invalid_argument("project_out: direction is not unit length");
  const T c = dot(v, u_hat);
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - c * u_hat[i];
  return out;
}

// ---------------------------------------------------------------------------
// Softmax with an optional hard key mask. Masked positions come out as exact
// zeros; the max subtraction and normalizer run over unmasked entries only,
// so sentinel arithmetic can never generate NaN.

template <typename T>
std::vector<T> masked_softmax_row(std::span<const T> scores, const RowMask<T>* mask) {
  const std::size_t n = scores.size();
  if (n == 0) throw std::invalid_argument("masked_softmax_row: empty row");
  if (mask) {
    if (mask->size() != n)
      throw std::invalid_argument("masked_softmax_row: mask length mismatch");
    if (!mask->any_unmasked())
      throw std::invalid_argument("masked_softmax_row: fully masked row");
  }
  for (const T s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("masked_softmax_row: non-finite score");

  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (mask && mask->masked(j)) continue;
    mx = std::max(mx, scores[j]);
  }

  std::vector<T> out(n, T(0));
  T sum = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    if (mask && mask->masked(j)) continue;
    const T e = std::exp(scores[j] - mx);
    out[j] = e;
    sum += e;
  }
  const T inv = T(1) / sum;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  return out;
}

template <typename T>
std::vector<T> softmax_row(std::span<const T> scores) {
  return masked_softmax_row<T>(scores, nullptr);
}

// ---------------------------------------------------------------------------
// RMSNorm. eps >= 0; a handful of callers pass 0 where the input RMS is
// known nonzero.

template <typename T>
void rms_norm(std::span<const T> x, std::span<const T> weight, T eps, T* out) {
  assert(x.size() == weight.size());
  T ss = T(0);
  for (const T v : x) ss += v * v;
  const T inv = T(1) / std::sqrt(ss / T(x.size()) + eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = weight[i] * x[i] * inv;
}

template <typename T>
std::vector<T> rms_norm(std::span<const T> x, std::span<const T> weight, T eps) {
  if (x.size() != weight.size()) throw std::invalid_argument("rms_norm: length mismatch");
  if (eps < T(0)) throw std::invalid_argument("rms_norm: negative eps");
  std::vector<T> out(x.size());
  rms_norm(x, weight, eps, out.data());
  return out;
}

template <typename T>
Matrix<T> rms_norm_rows(const Matrix<T>& x, std::span<const T> weight, T eps) {
  if (x.cols != weight.size()) throw std::invalid_argument("rms_norm_rows: length mismatch");
  Matrix<T> out(x.rows, x.cols);
  const std::ptrdiff_t m = std::ptrdiff_t(x.rows);
#pragma omp parallel for schedule(static) if (m > 8)
  for (std::ptrdiff_t i = 0; i < m; ++i)
    rms_norm(x.row(std::size_t(i)), weight, eps, out.row_ptr(std::size_t(i)));
  return out;
}

template <typename T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

// Rotary position embedding over adjacent pairs within one head row.
template <typename T>
void rope_apply(T* head, std::size_t d_head, long pos, double theta) {
  for (std::size_t i = 0; 2 * i + 1 < d_head; ++i) {
    const double freq = std::pow(theta, -2.0 * double(i) / double(d_head));
    const double angle = double(pos) * freq;
    const T c = T(std::cos(angle));
    const T s = T(std::sin(angle));
    const T x = head[2 * i];
    const T y = head[2 * i + 1];
    head[2 * i] = x * c - y * s;
    head[2 * i + 1] = x * s + y * c;
  }
}

}  // namespace acg
