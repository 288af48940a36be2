// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <set>
#include <vector>

#include "emoe/numerics.hpp"

using namespace emoe;

namespace {

// Scalar triple loop, independent of the kernel under test.
Matrix<double> naive_matmul(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST_CASE("matmul hand example", "[numerics]") {
  const auto a = Matrix<double>::from_rows({{1, 1}});
  const auto b = Matrix<double>::from_rows({{1, 0, -1, 2}, {0, 1, 1, 2}});
  const auto c = matmul(a, b);
  REQUIRE(c.rows() == 1);
  REQUIRE(c.cols() == 4);
  CHECK(c == Matrix<double>::from_rows({{1, 1, 0, 4}}));
  CHECK(c == naive_matmul(a, b));
}

TEST_CASE("matmul identity and zero", "[numerics]") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto m = random_normal<float>(2, 2, 1.0, rng);
    CHECK(bitwise_equal(matmul(Matrix<float>::identity(2), m), m));
    const auto z = matmul(Matrix<float>(2, 2), m);
    CHECK(std::all_of(z.values().begin(), z.values().end(), [](float v) { return v == 0.0f; }));
  }
}

TEST_CASE("matmul matches triple loop on random shapes", "[numerics][property]") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.uniform_index(6), k = 1 + rng.uniform_index(6),
                      c = 1 + rng.uniform_index(6);
    const auto a = random_normal<double>(r, k, 1.0, rng);
    const auto b = random_normal<double>(k, c, 1.0, rng);
    CHECK(max_relative_error<double>(matmul(a, b).values(), naive_matmul(a, b).values()) < 1e-14);
  }
}

TEST_CASE("matmul rejects mismatched shapes", "[numerics]") {
  CHECK_THROWS_AS(matmul(Matrix<float>(2, 3), Matrix<float>(2, 3)), ShapeError);
  CHECK_THROWS_AS(Matrix<float>(2, 2, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST_CASE("activations", "[numerics]") {
  const std::vector<float> a{1, 1, 0, 4};
  CHECK(apply_activation<float>(ActivationKind::ReLU, a) == a);
  const std::vector<float> b{-3, 2};
  CHECK(apply_activation<float>(ActivationKind::ReLU, b) == std::vector<float>{0, 2});
  const std::vector<double> zero{0.0};
  CHECK(apply_activation<double>(ActivationKind::GeluTanh, zero)[0] == 0.0);
  // Known value of the tanh approximation at 1.
  CHECK(activate(ActivationKind::GeluTanh, 1.0) == Catch::Approx(0.8411919906082768).epsilon(1e-14));
}

TEST_CASE("activation derivatives match central differences", "[numerics]") {
  for (double x : {-2.5, -0.7, -0.1, 0.3, 1.2, 3.0}) {
    for (auto kind : {ActivationKind::ReLU, ActivationKind::GeluTanh}) {
      const double eps = 1e-6;
      const double fd = (activate(kind, x + eps) - activate(kind, x - eps)) / (2 * eps);
      CHECK(activation_derivative(kind, x) == Catch::Approx(fd).epsilon(1e-7).margin(1e-9));
    }
  }
}

TEST_CASE("relu output is non-negative", "[numerics][property]") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(1 + rng.uniform_index(20));
    for (auto& x : v) x = rng.normal() * 5;
    for (double y : apply_activation<double>(ActivationKind::ReLU, v)) CHECK(y >= 0.0);
  }
}

TEST_CASE("topk_indices examples", "[numerics]") {
  const std::vector<double> s{1.0, 2.0};
  CHECK(topk_indices<double>(s, 1) == std::vector<std::size_t>{1});
  const std::vector<double> tie{5, 5, 5};
  CHECK(topk_indices<double>(tie, 2) == std::vector<std::size_t>{0, 1});
  CHECK(topk_indices<double>(tie, 3) == std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(topk_indices<double>(s, 0), ArgumentError);
  CHECK_THROWS_AS(topk_indices<double>(s, 3), ArgumentError);
}

TEST_CASE("topk splits the index set at the k-th score", "[numerics][property]") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(12);
    const std::size_t k = 1 + rng.uniform_index(n);
    std::vector<double> v(n);
    // Coarse values so ties occur.
    for (auto& x : v) x = static_cast<double>(rng.uniform_index(4));
    const auto top = topk_indices<double>(v, k);
    REQUIRE(top.size() == k);
    const std::set<std::size_t> chosen(top.begin(), top.end());
    REQUIRE(chosen.size() == k);
    double min_sel = 1e9, max_rest = -1e9;
    for (std::size_t i = 0; i < n; ++i) {
      if (chosen.count(i)) {
        min_sel = std::min(min_sel, v[i]);
      } else {
        max_rest = std::max(max_rest, v[i]);
      }
    }
    CHECK(min_sel >= max_rest);
    // Among equal scores at the boundary, lower indices win.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (v[i] == v[j] && chosen.count(j)) CHECK(chosen.count(i) == 1);
  }
}

TEST_CASE("rng is reproducible and in range", "[numerics]") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);

  // First output of mt19937_64 seeded with the default seed is fixed by the
  // standard.
  Rng standard(5489);
  CHECK(standard.next_u64() == 14514284786278117030ull);

  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    CHECK(r.uniform_index(7) < 7);
  }
  CHECK_THROWS_AS(r.uniform_index(0), ArgumentError);
}

TEST_CASE("normal variates have roughly unit moments", "[numerics]") {
  Rng r(9);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}
