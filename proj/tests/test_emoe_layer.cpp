// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <numeric>
#include <set>
#include <vector>

#include "emoe/emoe_layer.hpp"
#include "test_fixtures.hpp"

using namespace emoe;
using Idx = std::vector<std::size_t>;

TEST_CASE("split builds avg-k gate columns", "[emoe]") {
  const auto layer = testing::example_layer<float>();
  const auto moe = split(layer, testing::example_partition(), 1);
  REQUIRE(moe.n_experts() == 2);
  CHECK(moe.expert(0).neurons == Idx{0, 1});
  CHECK(moe.expert(1).neurons == Idx{2, 3});
  CHECK(moe.gate() == Matrix<float>::from_rows({{0.5f, 0.5f}, {0.5f, 1.5f}}));
}

TEST_CASE("degenerate splits", "[emoe]") {
  const auto layer = testing::example_layer<double>();
  const auto one = split(layer, Partition({0, 0, 0, 0}, 1), 1);
  CHECK(bitwise_equal(one.expert(0).keys, layer.keys()));
  CHECK(bitwise_equal(one.expert(0).values, layer.values()));
  CHECK(one.gate() == Matrix<double>::from_rows({{0.5}, {1.0}}));

  const auto each = split(layer, Partition({0, 1, 2, 3}, 4), 2);
  CHECK(bitwise_equal(each.gate(), layer.keys()));
}

TEST_CASE("split validates its inputs", "[emoe]") {
  const auto layer = testing::example_layer<double>();
  CHECK_THROWS_AS(split(layer, Partition({0, 0, 1, 1, 2, 2}, 3), 1), ConstraintError);
  CHECK_THROWS_AS(split(layer, testing::example_partition(), 3), ArgumentError);
  CHECK_THROWS_AS(split(layer, testing::example_partition(), 0), ArgumentError);
}

TEST_CASE("gate scores", "[emoe]") {
  const auto moe = split(testing::example_layer<double>(), testing::example_partition(), 1);
  CHECK(gate_scores<double>(moe, std::vector<double>{1, 1}) == std::vector<double>{1.0, 2.0});
  CHECK(gate_scores<double>(moe, std::vector<double>{0, 0}) == std::vector<double>{0.0, 0.0});
  CHECK_THROWS_AS(gate_scores<double>(moe, std::vector<double>{1}), ShapeError);

  Rng rng(4);
  const auto layer = testing::random_layer<double>(5, 20, ActivationKind::ReLU, rng);
  const auto single = split(layer, Partition(std::vector<std::uint32_t>(20, 0), 1), 1);
  for (int t = 0; t < 10; ++t) {
    const auto x = testing::random_vector<double>(5, rng);
    const auto pre = pre_activations<double>(layer, x);
    const double mean = std::accumulate(pre.begin(), pre.end(), 0.0) / 20.0;
    CHECK(gate_scores<double>(single, x)[0] == Catch::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("selection policies", "[emoe]") {
  const std::vector<double> s{1.0, 2.0};
  CHECK(select_experts<double>(s, SelectionPolicy::top(), 1) == Idx{1});
  CHECK(select_experts<double>(s, SelectionPolicy::bottom(), 1) == Idx{0});
  CHECK(select_experts<double>(s, SelectionPolicy::not_top(), 1) == Idx{0});
  CHECK(select_experts<double>(s, SelectionPolicy::all(), 1) == Idx{0, 1});
  CHECK(select_experts<double>(s, SelectionPolicy::top(), 2) == Idx{0, 1});
  CHECK_THROWS_AS(select_experts<double>(s, SelectionPolicy::not_top(), 2), ArgumentError);
  CHECK_THROWS_AS(select_experts<double>(s, SelectionPolicy::top(), 0), ArgumentError);
  CHECK_THROWS_AS(select_experts<double>(s, SelectionPolicy::bottom(), 3), ArgumentError);

  const std::vector<double> many{0.3, -1, 2, 7, 0.1, 5};
  const auto r1 = select_experts<double>(many, SelectionPolicy::random(9), 3);
  CHECK(r1 == select_experts<double>(many, SelectionPolicy::random(9), 3));
  CHECK(std::set<std::size_t>(r1.begin(), r1.end()).size() == 3);
  CHECK(parse_policy("nottop") == SelectionPolicy::not_top());
  CHECK_THROWS_AS(parse_policy("sideways"), ArgumentError);
}

TEST_CASE("random-k draws are roughly uniform", "[emoe]") {
  const std::vector<double> scores(8, 0.0);
  std::vector<int> hits(8, 0);
  for (std::uint64_t s = 0; s < 4000; ++s) {
    for (auto i : select_experts<double>(scores, SelectionPolicy::random(derive_seed(1, s)), 2)) {
      ++hits[i];
    }
  }
  for (int h : hits) CHECK(std::abs(h - 1000) < 150);
}

TEST_CASE("top and not-top partition the experts", "[emoe][property]") {
  Rng rng(55);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(14);
    const std::size_t k = 1 + rng.uniform_index(n - 1);
    const auto s = testing::random_vector<double>(n, rng);
    const auto top = select_experts<double>(s, SelectionPolicy::top(), k);
    const auto rest = select_experts<double>(s, SelectionPolicy::not_top(), k);
    CHECK(top.size() == k);
    CHECK(rest.size() == n - k);
    std::set<std::size_t> all(top.begin(), top.end());
    all.insert(rest.begin(), rest.end());
    CHECK(all.size() == n);
  }
}

TEST_CASE("sparse forward hand examples", "[emoe]") {
  const auto moe = split(testing::example_layer<float>(), testing::example_partition(), 1);
  const std::vector<float> x{1, 1};
  const auto top1 = emoe_forward<float>(moe, x, SelectionPolicy::top(), 1);
  CHECK(top1.selected == Idx{1});
  CHECK(top1.y == std::vector<float>{8, 0});

  const auto dense = emoe_forward<float>(moe, x, SelectionPolicy::top(), 2);
  CHECK(dense.y == std::vector<float>{9, 1});

  for (auto p : {SelectionPolicy::top(), SelectionPolicy::bottom(), SelectionPolicy::all(),
                 SelectionPolicy::random(3)}) {
    CHECK(emoe_forward<float>(moe, std::vector<float>{0, 0}, p, 1).y == std::vector<float>{0, 0});
  }
}

TEST_CASE("top-N forward equals the dense layer", "[emoe][property]") {
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 4 + rng.uniform_index(13);
    const std::size_t d = 4 * h;
    std::vector<std::size_t> divisors;
    for (std::size_t n = 1; n <= d; ++n)
      if (d % n == 0) divisors.push_back(n);
    const std::size_t n = divisors[rng.uniform_index(divisors.size())];
    const auto kind = trial % 2 ? ActivationKind::ReLU : ActivationKind::GeluTanh;

    const auto layer64 = testing::random_layer<double>(h, d, kind, rng);
    const auto x64 = testing::random_vector<double>(h, rng);
    const auto part = random_partition(d, n, trial);
    const auto moe64 = split(layer64, part, n);
    CHECK(max_relative_error<double>(emoe_forward<double>(moe64, x64).y,
                                     ffn_forward<double>(layer64, x64)) <= 1e-12);

    const FfnLayer<float> layer32(layer64.keys().cast<float>(), layer64.values().cast<float>(), kind);
    const std::vector<float> x32(x64.begin(), x64.end());
    const auto moe32 = split(layer32, part, n);
    CHECK(max_relative_error<float>(emoe_forward<float>(moe32, x32).y,
                                    ffn_forward<float>(layer32, x32)) <= 1e-5);
  }
}

TEST_CASE("gate score equals scaled sum of expert pre-activations", "[emoe][property]") {
  Rng rng(78);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 2 + rng.uniform_index(10);
    const std::size_t n = 1 + rng.uniform_index(8);
    const std::size_t d = n * (1 + rng.uniform_index(8));
    const auto layer = testing::random_layer<double>(h, d, ActivationKind::ReLU, rng);
    const auto part = random_partition(d, n, trial);
    const auto moe = split(layer, part, 1);
    const auto x = testing::random_vector<double>(h, rng);
    const auto scores = gate_scores<double>(moe, x);
    const auto pre = pre_activations<double>(layer, x);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        if (part.assignment()[j] == i) sum += pre[j];
      const double expected = double(n) / double(d) * sum;
      CHECK(std::abs(scores[i] - expected) <= 1e-6 * std::max(std::abs(expected), 1e-12) + 1e-14);
    }
  }
}

TEST_CASE("gate scores scale with the input", "[emoe][property]") {
  Rng rng(79);
  for (int trial = 0; trial < 50; ++trial) {
    const auto layer = testing::random_layer<double>(6, 24, ActivationKind::ReLU, rng);
    const auto moe = split(layer, random_partition(24, 6, trial), 2);
    const auto x = testing::random_vector<double>(6, rng);
    const double alpha = 0.1 + rng.uniform() * 3;
    auto ax = x;
    for (auto& v : ax) v *= alpha;
    const auto s = gate_scores<double>(moe, x);
    const auto as = gate_scores<double>(moe, ax);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(as[i] == Catch::Approx(alpha * s[i]).margin(1e-12));
    CHECK(emoe_forward<double>(moe, x).selected == emoe_forward<double>(moe, ax).selected);
  }
}

TEST_CASE("relabelled partitions give identical outputs", "[emoe][property]") {
  Rng rng(80);
  for (int trial = 0; trial < 50; ++trial) {
    const auto layer = testing::random_layer<double>(8, 32, ActivationKind::ReLU, rng);
    const auto part = random_partition(32, 4, trial);
    std::vector<std::uint32_t> relabel{2, 0, 3, 1};
    std::vector<std::uint32_t> renamed(32);
    for (std::size_t j = 0; j < 32; ++j) renamed[j] = relabel[part.assignment()[j]];
    const auto a = split(layer, part, 2);
    const auto b = split(layer, Partition(renamed, 4), 2);
    const auto x = testing::random_vector<double>(8, rng);
    const auto ya = emoe_forward<double>(a, x);
    const auto yb = emoe_forward<double>(b, x);
    CHECK(max_relative_error<double>(ya.y, yb.y) <= 1e-12);
    std::set<std::uint32_t> mapped;
    for (auto i : ya.selected) mapped.insert(relabel[i]);
    CHECK(mapped == std::set<std::uint32_t>(yb.selected.begin(), yb.selected.end()));
  }
}

TEST_CASE("merge inverts split bitwise", "[emoe][property]") {
  const auto layer = testing::example_layer<float>();
  CHECK(bitwise_equal(merge(split(layer, testing::example_partition(), 1)), layer));
  CHECK(bitwise_equal(merge(split(layer, Partition({0, 0, 0, 0}, 1), 1)), layer));

  Rng rng(81);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(6);
    const std::size_t d = n * (1 + rng.uniform_index(6));
    auto layer64 = testing::random_layer<double>(3, d, ActivationKind::GeluTanh, rng);
    const auto part = random_partition(d, n, trial);
    CHECK(bitwise_equal(merge(split(layer64, part, 1)), layer64));
  }
}

TEST_CASE("merge reflects in-place expert updates", "[emoe]") {
  const auto layer = testing::example_layer<float>();
  auto moe = split(layer, testing::example_partition(), 1);
  moe.mutable_expert(1).values(1, 0) = 7.0f;  // neuron 3, first value component
  const auto merged = merge(moe);
  CHECK(merged.values()(3, 0) == 7.0f);
  CHECK(merged.values()(2, 0) == 1.0f);

  moe.mutable_expert(0).neurons = {0, 2};  // duplicates neuron 2
  CHECK_THROWS_AS(merge(moe), ConstraintError);
}

TEST_CASE("biases survive split and merge", "[emoe]") {
  const auto base = testing::example_layer<double>();
  const FfnLayer<double> layer(base.keys(), base.values(), ActivationKind::ReLU, {-1, 0, 0.5, 2},
                               {0.25, -0.5});
  const auto moe = split(layer, testing::example_partition(), 2);
  CHECK(bitwise_equal(merge(moe), layer));
  const std::vector<double> x{1, 1};
  // Post-bias gate score: mean of (x.K + b_k) per expert.
  CHECK(gate_scores<double>(moe, x) == std::vector<double>{0.5, 3.25});
  CHECK(emoe_forward<double>(moe, x).y == ffn_forward<double>(layer, x));
}

TEST_CASE("prune", "[emoe]") {
  const auto moe = split(testing::example_layer<float>(), testing::example_partition(), 2);
  const auto same = prune(moe, {0, 1});
  CHECK(bitwise_equal(same, moe));

  const auto kept = prune(moe, {1});
  CHECK(kept.n_experts() == 1);
  CHECK(kept.top_k() == 1);
  CHECK(kept.d() == 2);
  CHECK(kept.expert(0).neurons == Idx{0, 1});
  CHECK(emoe_forward<float>(kept, std::vector<float>{1, 1}).y == std::vector<float>{8, 0});

  CHECK_THROWS_AS(prune(moe, {}), ArgumentError);
  CHECK_THROWS_AS(prune(moe, {2}), ArgumentError);
  CHECK_THROWS_AS(prune(moe, {1, 1}), ArgumentError);
}

TEST_CASE("learned gate mixes selected experts with a softmax", "[emoe]") {
  const auto moe = split(testing::example_layer<double>(), testing::example_partition(), 2,
                         GateMode::Learned);
  const std::vector<double> x{1, 1};
  // Scores [1, 2]; expert outputs [1, 1] and [8, 0].
  const double w0 = 1.0 / (1.0 + std::exp(1.0));
  const double w1 = 1.0 - w0;
  const auto y = emoe_forward<double>(moe, x).y;
  CHECK(y[0] == Catch::Approx(w0 * 1 + w1 * 8).epsilon(1e-14));
  CHECK(y[1] == Catch::Approx(w0 * 1).epsilon(1e-14));
  // With one expert selected its weight is exactly 1.
  CHECK(emoe_forward<double>(moe, x, SelectionPolicy::top(), 1).y == std::vector<double>{8, 0});
}
