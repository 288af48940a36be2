// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense matrix kernel, activation functions and the deterministic random
// stream shared by the rest of the toolkit.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "emoe/error.hpp"

namespace emoe {

/// Accumulator type used for every reduction. Single-precision storage is
/// reduced in double so that differently grouped sums of the same terms
/// round to the same float.
template <typename T>
using accum_t = std::conditional_t<std::is_same_v<T, float>, double, T>;

template <typename T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

/// Row-major dense matrix.
template <Real T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  /// Builds a matrix from nested row lists; all rows must have equal length.
  static Matrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged row list");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::vector<T> column(std::size_t c) const {
    std::vector<T> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <Real U>
  Matrix<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Matrix<U>(rows_, cols_, std::move(out));
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

/// Byte-for-byte equality, distinguishing -0 from +0.
template <Real T>
bool bitwise_equal(std::span<const T> a, std::span<const T> b) noexcept {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0);
}

template <Real T>
bool bitwise_equal(const Matrix<T>& a, const Matrix<T>& b) noexcept {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         bitwise_equal<T>(a.values(), b.values());
}

/// a * b with each output entry summed in ascending inner index.
template <Real T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix<T> out(a.rows(), b.cols());
  std::vector<accum_t<T>> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), accum_t<T>{0});
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const accum_t<T> aik = a(i, k);
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * brow[j];
    }
    for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) = static_cast<T>(acc[j]);
  }
  return out;
}

/// Row vector times matrix: x * m.
template <Real T>
std::vector<T> vec_mat(std::span<const T> x, const Matrix<T>& m) {
  if (x.size() != m.rows()) {
    throw ShapeError("vec_mat: vector length " + std::to_string(x.size()) +
                     " vs matrix rows " + std::to_string(m.rows()));
  }
  std::vector<accum_t<T>> acc(m.cols(), accum_t<T>{0});
  for (std::size_t k = 0; k < m.rows(); ++k) {
    const accum_t<T> xk = x[k];
    const auto mrow = m.row(k);
    for (std::size_t j = 0; j < m.cols(); ++j) acc[j] += xk * mrow[j];
  }
  return {acc.begin(), acc.end()};
}

/// Matrix times column vector: m * x.
template <Real T>
std::vector<T> mat_vec(const Matrix<T>& m, std::span<const T> x) {
  if (x.size() != m.cols()) {
    throw ShapeError("mat_vec: vector length " + std::to_string(x.size()) +
                     " vs matrix cols " + std::to_string(m.cols()));
  }
  std::vector<T> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    accum_t<T> acc{0};
    const auto mrow = m.row(r);
    for (std::size_t k = 0; k < m.cols(); ++k) acc += accum_t<T>(mrow[k]) * x[k];
    out[r] = static_cast<T>(acc);
  }
  return out;
}

template <Real T>
accum_t<T> dot(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  accum_t<T> acc{0};
  for (std::size_t i = 0; i < a.size(); ++i) acc += accum_t<T>(a[i]) * b[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Activations

enum class ActivationKind : std::uint8_t { ReLU = 0, GeluTanh = 1 };

inline std::string_view to_string(ActivationKind kind) {
  return kind == ActivationKind::ReLU ? "relu" : "gelu_tanh";
}

inline ActivationKind activation_from_code(double code) {
  if (code == 0.0) return ActivationKind::ReLU;
  if (code == 1.0) return ActivationKind::GeluTanh;
  throw ValidationError("unknown activation code " + std::to_string(code));
}

namespace detail {
inline constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluCubic = 0.044715;
}  // namespace detail

template <Real T>
T activate(ActivationKind kind, T x) noexcept {
  if (kind == ActivationKind::ReLU) return x > T{0} ? x : T{0};
  const T u = static_cast<T>(detail::kGeluScale) * (x + static_cast<T>(detail::kGeluCubic) * x * x * x);
  return T{0.5} * x * (T{1} + std::tanh(u));
}

/// d activate / dx. ReLU uses 0 at the kink.
template <Real T>
T activation_derivative(ActivationKind kind, T x) noexcept {
  if (kind == ActivationKind::ReLU) return x > T{0} ? T{1} : T{0};
  const T c = static_cast<T>(detail::kGeluScale);
  const T a = static_cast<T>(detail::kGeluCubic);
  const T t = std::tanh(c * (x + a * x * x * x));
  return T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * c * (T{1} + T{3} * a * x * x);
}

template <Real T>
std::vector<T> apply_activation(ActivationKind kind, std::span<const T> v) {
  std::vector<T> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [kind](T x) { return activate(kind, x); });
  return out;
}

// ---------------------------------------------------------------------------
// Selection

/// Indices of the k largest scores, returned in ascending index order.
/// Equal scores prefer the lower index.
template <Real T>
std::vector<std::size_t> topk_indices(std::span<const T> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw ArgumentError("top-k: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

/// Indices of the k smallest scores, ascending index order; ties prefer the
/// lower index.
template <Real T>
std::vector<std::size_t> bottomk_indices(std::span<const T> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw ArgumentError("bottom-k: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

// ---------------------------------------------------------------------------
// Random numbers

/// Deterministic random stream: the 64-bit Mersenne Twister (mt19937_64),
/// whose output sequence is fixed by the C++ standard. Derived quantities
/// (uniform reals, bounded integers, normals) are computed here rather than
/// with <random> distributions, whose algorithms vary between standard
/// libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed), seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), by rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ArgumentError("uniform_index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    constexpr double kTwoPi = 6.283185307179586;
    spare_ = r * std::sin(kTwoPi * u2);
    has_spare_ = true;
    return r * std::cos(kTwoPi * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = uniform_index(i);
      std::iter_swap(first + (i - 1), first + j);
    }
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; combines a base seed with a salt into an
/// independent-looking child seed.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// Matrix of independent N(0, stddev^2) entries.
template <Real T>
Matrix<T> random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Matrix<T> m(rows, cols);
  for (auto& v : m.values()) v = static_cast<T>(stddev * rng.normal());
  return m;
}

/// Largest |a_i - b_i| divided by the largest |b_i| (floored at `floor`).
template <Real T>
double max_relative_error(std::span<const T> a, std::span<const T> b, double floor = 1e-30) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: length mismatch");
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(double(a[i]) - double(b[i])));
    scale = std::max(scale, std::abs(double(b[i])));
  }
  return diff / std::max(scale, floor);
}

}  // namespace emoe
