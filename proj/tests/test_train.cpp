// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <limits>
#include <set>
#include <sstream>
#include <vector>

#include "emoe/checkpoint.hpp"
#include "emoe/experiment.hpp"
#include "emoe/train.hpp"
#include "test_fixtures.hpp"

using namespace emoe;

namespace {

ToyModel hand_model(bool residual) {
  ToyModel m;
  m.input_proj = Matrix<double>::identity(2);
  m.blocks.push_back({testing::example_layer<double>(), residual});
  m.head = Matrix<double>::identity(2);
  return m;
}

Batch conditioned_batch(const ToyModel& m, const Dataset& ds, std::size_t n, SelectionPolicy p,
                        std::size_t k) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.data.size() && idx.size() < n; ++i) {
    if (well_conditioned(m, ds.data.inputs.row(i), p, k)) idx.push_back(i);
  }
  REQUIRE(idx.size() == n);
  return ds.subset(idx);
}

Dataset small_task(std::uint64_t seed, std::size_t h_in = 6) {
  return make_toy_dataset({.n_clusters = 4, .h_in = h_in, .n_classes = 3, .noise_sigma = 0.5,
                           .samples_per_cluster = 20, .seed = seed, .label_seed = std::nullopt});
}

ToyModel two_block_model(std::uint64_t seed, std::size_t h_in = 6) {
  return make_toy_model({.h_in = h_in, .h = 5, .d = 12, .n_classes = 3, .n_blocks = 2,
                         .activation = ActivationKind::ReLU, .residual = true, .seed = seed});
}

}  // namespace

TEST_CASE("forward pass hand examples", "[train]") {
  const std::vector<double> x{1, 1};
  CHECK(model_forward(hand_model(false), x).logits == std::vector<double>{9, 1});
  CHECK(model_forward(hand_model(true), x).logits == std::vector<double>{10, 2});

  auto zero = hand_model(true);
  zero.input_proj = Matrix<double>(2, 2);
  zero.head = Matrix<double>(2, 2);
  CHECK(model_forward(zero, x).logits == std::vector<double>{0, 0});

  CHECK_THROWS_AS(model_forward(hand_model(true), std::vector<double>{1, 1, 1}), ShapeError);
}

TEST_CASE("adapter effective weight", "[train]") {
  auto m = two_block_model(1);
  add_adapter(m, 3, 6.0, 2);
  CHECK(bitwise_equal(m.effective_input_proj(), m.input_proj));
  Rng rng(3);
  m.adapter->b = random_normal<double>(m.h(), 3, 1.0, rng);
  const auto ba = matmul(m.adapter->b, m.adapter->a);
  const auto w = m.effective_input_proj();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      CHECK(w(r, c) == Catch::Approx(m.input_proj(r, c) + 2.0 * ba(r, c)).epsilon(1e-13));
    }
  }
  CHECK_THROWS_AS(add_adapter(m, 2, 1.0, 0), StateError);
}

TEST_CASE("split blocks with every expert match the dense model", "[train]") {
  const auto m = two_block_model(4);
  const auto ds = small_task(5);
  const auto split_model = convert_lora2emoe(m, random_blocks(m, 4, 6), 4);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto a = model_forward(m, ds.data.inputs.row(i)).logits;
    const auto b = model_forward(split_model, ds.data.inputs.row(i)).logits;
    CHECK(max_relative_error<double>(b, a) <= 1e-5);
  }
}

TEST_CASE("finite differences agree with the analytic gradient", "[train][gradient]") {
  const auto ds = small_task(7);
  const auto dense = two_block_model(8);

  SECTION("dense") {
    const auto b = conditioned_batch(dense, ds, 4, SelectionPolicy::top(), 0);
    CHECK(finite_diff_check(dense, b, 1e-5).max_relative_error <= 1e-4);
  }
  SECTION("avg-k experts") {
    const auto m = convert_lora2emoe(dense, cluster_blocks(dense, 4, 9), 2);
    const auto b = conditioned_batch(m, ds, 4, SelectionPolicy::top(), 2);
    const auto r = finite_diff_check(m, b, 1e-5, SelectionPolicy::top(), 2);
    CHECK(r.max_relative_error <= 1e-4);
    CHECK(r.scalars_checked == zero_gradients(m).scalar_count());
  }
  SECTION("learned gate") {
    const auto m = convert_lora2emoe(dense, cluster_blocks(dense, 4, 9), 2, GateMode::Learned);
    const auto b = conditioned_batch(m, ds, 4, SelectionPolicy::top(), 2);
    const auto r = finite_diff_check(m, b, 1e-5, SelectionPolicy::top(), 2);
    CHECK(r.max_relative_error <= 1e-4);
    // The gate is a parameter in learned mode.
    CHECK(r.scalars_checked == zero_gradients(m).scalar_count());
  }
  SECTION("frozen FFN with adapter") {
    auto m = convert_lora2emoe(dense, cluster_blocks(dense, 4, 9), 2);
    add_adapter(m, 2, 4.0, 10);
    Rng rng(11);
    m.adapter->b = random_normal<double>(m.h(), 2, 0.3, rng);
    m.trainable = {.input_proj = false, .adapter = true, .ffn = false, .gate = false, .head = true};
    const auto b = conditioned_batch(m, ds, 4, SelectionPolicy::top(), 2);
    CHECK(finite_diff_check(m, b, 1e-5, SelectionPolicy::top(), 2).max_relative_error <= 1e-4);
  }
  SECTION("bottom-k selection") {
    const auto m = convert_lora2emoe(dense, cluster_blocks(dense, 4, 9), 1);
    const auto b = conditioned_batch(m, ds, 4, SelectionPolicy::bottom(), 1);
    CHECK(finite_diff_check(m, b, 1e-5, SelectionPolicy::bottom(), 1).max_relative_error <= 1e-4);
  }
}

TEST_CASE("a model without blocks has the closed-form gradient", "[train][gradient]") {
  auto m = two_block_model(12);
  m.blocks.clear();
  const auto ds = small_task(13);
  const std::vector<std::size_t> rows{0, 7, 21};
  const auto batch = ds.subset(rows);
  const auto g = batch_gradients(m, batch).grads;

  // logits = H P x, so dP = H^T (p - y) x^T / n and dH = (p - y) (P x)^T / n.
  Matrix<double> dP(m.h(), m.h_in());
  Matrix<double> dH(m.n_classes(), m.h());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto x = batch.inputs.row(i);
    std::vector<double> z(m.h(), 0.0);
    for (std::size_t r = 0; r < m.h(); ++r)
      for (std::size_t c = 0; c < m.h_in(); ++c) z[r] += m.input_proj(r, c) * x[c];
    std::vector<double> logits(m.n_classes(), 0.0);
    for (std::size_t r = 0; r < m.n_classes(); ++r)
      for (std::size_t c = 0; c < m.h(); ++c) logits[r] += m.head(r, c) * z[c];
    double total = 0.0;
    for (double l : logits) total += std::exp(l);
    std::vector<double> delta(m.n_classes());
    for (std::size_t r = 0; r < delta.size(); ++r) {
      delta[r] = (std::exp(logits[r]) / total - (r == batch.labels[i] ? 1.0 : 0.0)) / 3.0;
    }
    for (std::size_t r = 0; r < m.n_classes(); ++r)
      for (std::size_t c = 0; c < m.h(); ++c) dH(r, c) += delta[r] * z[c];
    for (std::size_t r = 0; r < m.h(); ++r) {
      double back = 0.0;
      for (std::size_t t = 0; t < m.n_classes(); ++t) back += m.head(t, r) * delta[t];
      for (std::size_t c = 0; c < m.h_in(); ++c) dP(r, c) += back * x[c];
    }
  }
  CHECK(max_relative_error<double>(g.at("input_proj").values(), dP.values()) <= 1e-12);
  CHECK(max_relative_error<double>(g.at("head").values(), dH.values()) <= 1e-12);

  // Central differences on a cross-entropy loss bottom out at the rounding
  // floor (about 1e-16 / epsilon absolute) on the smallest entries.
  CHECK(finite_diff_check(m, batch, 1e-5).max_relative_error <= 1e-6);
  CHECK_THROWS_AS(finite_diff_check(m, ds.train(), 0.0), ArgumentError);
}

TEST_CASE("gradient masking and freezing", "[train][gradient]") {
  const auto ds = small_task(14);
  auto m = convert_lora2emoe(two_block_model(15), random_blocks(two_block_model(15), 4, 16), 2);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto c = model_forward(m, ds.data.inputs.row(i));
    const auto g = model_backward(m, c, std::vector<double>{0.3, -0.5, 0.2});
    for (std::size_t b = 0; b < 2; ++b) {
      const std::set<std::size_t> sel(c.blocks[b].selected.begin(), c.blocks[b].selected.end());
      for (std::size_t e = 0; e < 4; ++e) {
        if (sel.count(e)) continue;
        const auto p = "block" + std::to_string(b) + ".";
        for (double v : g.at(p + "K_" + std::to_string(e)).values()) CHECK(v == 0.0);
        for (double v : g.at(p + "V_" + std::to_string(e)).values()) CHECK(v == 0.0);
      }
    }
  }

  m.trainable.ffn = false;
  m.trainable.input_proj = false;
  const auto g = batch_gradients(m, ds.train()).grads;
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    if (g.groups[i] == ParamGroup::Ffn || g.groups[i] == ParamGroup::InputProj) {
      for (double v : g.values[i].values()) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("stale caches are rejected", "[train]") {
  auto m = two_block_model(17);
  const auto ds = small_task(18);
  const auto c = model_forward(m, ds.data.inputs.row(0));
  m.touch();
  CHECK_THROWS_AS(model_backward(m, c, std::vector<double>{1, 0, 0}), StateError);
}

TEST_CASE("toy datasets", "[train][data]") {
  const auto flat = make_toy_dataset({.n_clusters = 3, .h_in = 4, .n_classes = 2, .noise_sigma = 0.0,
                                      .samples_per_cluster = 5, .seed = 1, .label_seed = std::nullopt});
  for (std::size_t i = 0; i < flat.data.size(); ++i) {
    const std::size_t first = flat.clusters[i] * 5;
    CHECK(bitwise_equal<double>(flat.data.inputs.row(i), flat.data.inputs.row(first)));
  }

  const ToyTaskSpec task{.n_clusters = 2, .h_in = 3, .n_classes = 2, .noise_sigma = 0.3,
                         .samples_per_cluster = 10, .seed = 4, .label_seed = std::nullopt};
  const auto a = make_toy_dataset(task);
  const auto b = make_toy_dataset(task);
  CHECK(bitwise_equal(a.data.inputs, b.data.inputs));
  CHECK(a.data.labels == b.data.labels);
  CHECK(a.train_index == b.train_index);
  REQUIRE(a.data.size() == 20);
  CHECK(std::count(a.data.labels.begin(), a.data.labels.end(), 0u) == 10);
  CHECK(a.test_index.size() == 4);
  CHECK(a.train_index.size() == 16);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    CHECK(a.data.labels[i] == a.label_of_cluster[a.clusters[i]]);
  }

  auto other = task;
  other.label_seed = 99;
  const auto c = make_toy_dataset(other);
  CHECK(bitwise_equal(a.data.inputs, c.data.inputs));

  auto bad = task;
  bad.samples_per_cluster = 0;
  CHECK_THROWS_AS(make_toy_dataset(bad), ArgumentError);
  bad = task;
  bad.noise_sigma = -1;
  CHECK_THROWS_AS(make_toy_dataset(bad), ArgumentError);
}

TEST_CASE("training contracts", "[train]") {
  const auto ds = small_task(20);
  const auto m0 = convert_lora2emoe(two_block_model(21), cluster_blocks(two_block_model(21), 4, 22), 2);
  TrainConfig cfg{.steps = 30, .batch_size = 8, .learning_rate = 1e-2, .seed = 23, .log_window = 10};

  SECTION("zero learning rate leaves parameters unchanged") {
    auto c = cfg;
    c.learning_rate = 0.0;
    CHECK(bitwise_equal(train(m0, ds, c).model, m0));
    c.optimizer = OptimizerKind::Sgd;
    CHECK(bitwise_equal(train(m0, ds, c).model, m0));
  }
  SECTION("same seeds give identical logs and models") {
    const auto a = train(m0, ds, cfg);
    const auto b = train(m0, ds, cfg);
    CHECK(a.log == b.log);
    CHECK(bitwise_equal(a.model, b.model));
    CHECK(a.log.loss.size() == 30);
    CHECK(a.log.usage.size() == 3 * 2);
    for (const auto& w : a.log.usage) CHECK(w.histogram.tokens_seen == 10 * 8);
  }
  SECTION("frozen groups are untouched and avg-k gates stay tied") {
    auto frozen = m0;
    frozen.trainable.ffn = false;
    frozen.trainable.input_proj = false;
    const auto r = train(frozen, ds, cfg);
    CHECK(bitwise_equal(r.model.input_proj, frozen.input_proj));
    for (std::size_t b = 0; b < 2; ++b) {
      CHECK(bitwise_equal(r.model.blocks[b], frozen.blocks[b]));
    }
    CHECK(!bitwise_equal(r.model.head, frozen.head));

    const auto full = train(m0, ds, cfg);
    for (const auto& b : full.model.blocks) {
      const auto& moe = std::get<EmoeLayer<double>>(b.layer);
      CHECK(bitwise_equal(moe.gate(), EmoeLayer<double>::average_keys(moe.experts(), moe.h())));
    }
  }
  SECTION("divergence reports the step") {
    auto c = cfg;
    c.optimizer = OptimizerKind::Sgd;
    c.learning_rate = 1e300;
    try {
      (void)train(m0, ds, c);
      FAIL("expected a training error");
    } catch (const TrainingError& e) {
      CHECK(e.step() >= 1);
    }
  }
  SECTION("bad configuration") {
    auto c = cfg;
    c.batch_size = 0;
    CHECK_THROWS_AS(train(m0, ds, c), ArgumentError);
    c = cfg;
    c.learning_rate = -1;
    CHECK_THROWS_AS(train(m0, ds, c), ArgumentError);
  }
}

TEST_CASE("dense baseline learns the separable task", "[train][slow]") {
  const auto ds = make_toy_dataset({.n_clusters = 8, .h_in = 16, .n_classes = 4, .noise_sigma = 0.5,
                                    .samples_per_cluster = 50, .seed = 30, .label_seed = std::nullopt});
  const auto m = make_toy_model({.h_in = 16, .h = 16, .d = 64, .n_classes = 4, .seed = 31});
  const auto r = train(m, ds, {.steps = 2000, .batch_size = 32, .learning_rate = 1e-2, .seed = 32});
  CHECK(r.log.train_accuracy >= 0.95);
}

TEST_CASE("conversions", "[train]") {
  const auto dense = two_block_model(40);
  const auto parts = cluster_blocks(dense, 4, 41);
  const auto moe = convert_lora2emoe(dense, parts, 2);
  CHECK(moe.blocks[0].is_split());
  CHECK(bitwise_equal(convert_emoe2lora(moe), dense));
  CHECK_THROWS_AS(convert_lora2emoe(moe, parts, 2), StateError);
  CHECK_THROWS_AS(convert_emoe2lora(dense), StateError);
  CHECK_THROWS_AS(convert_lora2emoe(dense, {parts[0]}, 2), ConstraintError);
  CHECK_THROWS_AS(convert_lora2emoe(dense, {parts[0], random_partition(8, 4, 0)}, 2),
                  ConstraintError);

  const auto all = convert_lora2emoe(dense, parts, 4);
  const auto ds = small_task(42);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(max_relative_error<double>(model_forward(all, ds.data.inputs.row(i)).logits,
                                     model_forward(dense, ds.data.inputs.row(i)).logits) <= 1e-5);
  }
}

TEST_CASE("model checkpoints", "[train][io]") {
  testing::TempDir dir("train_ckpt");
  auto m = two_block_model(50);
  save_model(dir / "dense.emoe", m);
  CHECK(bitwise_equal(load_model(dir / "dense.emoe"), m));

  auto s = convert_lora2emoe(m, random_blocks(m, 3, 51), 2, GateMode::Learned);
  add_adapter(s, 2, 3.0, 52);
  s.blocks[1].residual = false;
  s.trainable.ffn = false;
  save_model(dir / "split.emoe", s);
  CHECK(bitwise_equal(load_model(dir / "split.emoe"), s));

  auto t = model_tensors(s);
  for (auto& tensor : t) {
    if (tensor.name == "model.meta") std::get<std::vector<double>>(tensor.data)[1] = 7;
  }
  CHECK_THROWS_AS(model_from_tensors(t), ValidationError);

  CHECK_THROWS_AS(load_model(dir / "missing.emoe"), IoError);
}

TEST_CASE("training log export", "[train][io]") {
  TrainLog log;
  log.loss = {1.5, 0.25};
  UsageHistogram h{{3, 1}, 2, 2, 0};
  log.usage.push_back({0, 1, h});
  std::ostringstream loss;
  write_loss_csv(loss, log);
  CHECK(loss.str() == "step,loss\n0,1.5\n1,0.25\n");
  std::ostringstream usage;
  write_usage_csv(usage, log);
  CHECK(usage.str() == "window,first_step,block,tokens,expert_0,expert_1\n0,0,1,2,3,1\n");
}

TEST_CASE("transfer workflow is deterministic", "[train][slow]") {
  TransferConfig cfg;
  cfg.task.samples_per_cluster = 40;
  cfg.pretrain.steps = 100;
  cfg.finetune.steps = 60;
  const auto a = run_transfer(cfg, 3);
  const auto b = run_transfer(cfg, 3);
  CHECK(a.top == b.top);
  CHECK(a.dense == b.dense);
  CHECK(a.random_top == b.random_top);
  CHECK(a.conversions_bitwise);
  CHECK(median({0.2, 0.9, 0.5}) == 0.5);
  CHECK(median({0.2, 0.4}) == Catch::Approx(0.3));
}
