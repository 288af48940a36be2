// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Transfer workflow on the toy task: pretrain a dense model on one
// cluster-to-label rule, then tune only the adapter and head on a second
// rule, either densely or through experts split from the frozen FFN.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "emoe/clustering.hpp"
#include "emoe/emoe_layer.hpp"
#include "emoe/train.hpp"

namespace emoe {

struct TransferConfig {
  ToyTaskSpec task{.n_clusters = 8,
                   .h_in = 16,
                   .n_classes = 4,
                   .noise_sigma = 0.5,
                   .samples_per_cluster = 300,
                   .seed = 0,
                   .label_seed = std::nullopt};
  ToyModelConfig model{.h_in = 16,
                       .h = 16,
                       .d = 64,
                       .n_classes = 4,
                       .n_blocks = 1,
                       .activation = ActivationKind::ReLU,
                       .residual = true,
                       .seed = 0};
  std::size_t n_experts = 8;
  std::size_t top_k = 2;
  std::size_t adapter_rank = 4;
  double adapter_alpha = 8.0;
  TrainConfig pretrain{.steps = 1000, .batch_size = 32, .learning_rate = 1e-2};
  TrainConfig finetune{.steps = 1500, .batch_size = 32, .learning_rate = 1e-2};
};

/// Seeds of every stochastic stage of one run, all derived from `seed`.
struct TransferSeeds {
  std::uint64_t data, rule_a, rule_b, init, pretrain, adapter, cluster, random_split, finetune;

  static TransferSeeds from(std::uint64_t seed) {
    return {derive_seed(seed, 11), derive_seed(seed, 12), derive_seed(seed, 13),
            derive_seed(seed, 14), derive_seed(seed, 15), derive_seed(seed, 16),
            derive_seed(seed, 17), derive_seed(seed, 18), derive_seed(seed, 19)};
  }
};

struct TransferSetup {
  Dataset source;  // rule A
  Dataset target;  // rule B, same inputs
  ToyModel base;   // pretrained, adapter attached, only adapter and head trainable
  double source_accuracy = 0.0;
};

inline TransferSetup prepare_transfer(const TransferConfig& cfg, std::uint64_t seed) {
  const auto s = TransferSeeds::from(seed);
  TransferSetup out;
  auto task = cfg.task;
  task.seed = s.data;
  task.label_seed = s.rule_a;
  out.source = make_toy_dataset(task);
  task.label_seed = s.rule_b;
  out.target = make_toy_dataset(task);

  auto mc = cfg.model;
  mc.h_in = task.h_in;
  mc.n_classes = task.n_classes;
  mc.seed = s.init;
  auto pre_cfg = cfg.pretrain;
  pre_cfg.seed = s.pretrain;
  auto pre = train(make_toy_model(mc), out.source, pre_cfg);
  out.source_accuracy = pre.log.test_accuracy;

  out.base = std::move(pre.model);
  add_adapter(out.base, cfg.adapter_rank, cfg.adapter_alpha, s.adapter);
  out.base.trainable = {.input_proj = false, .adapter = true, .ffn = false, .gate = false, .head = true};
  return out;
}

struct TransferOutcome {
  std::uint64_t seed = 0;
  double source_accuracy = 0.0;
  double dense = 0.0;        // dense tuning
  double top = 0.0;          // cluster split, top-k
  double bottom = 0.0;       // cluster split, bottom-k
  double random_top = 0.0;   // random split, top-k
  double top_merged = 0.0;   // top-k tuned model evaluated after merging
  bool conversions_bitwise = false;
};

/// Runs every variant of one seed.
inline TransferOutcome run_transfer(const TransferConfig& cfg, std::uint64_t seed) {
  const auto s = TransferSeeds::from(seed);
  const auto setup = prepare_transfer(cfg, seed);
  const auto& target = setup.target;
  TransferOutcome out;
  out.seed = seed;
  out.source_accuracy = setup.source_accuracy;

  auto ft = cfg.finetune;
  ft.seed = s.finetune;
  ft.policy = SelectionPolicy::top();
  ft.k = cfg.top_k;
  out.dense = train(setup.base, target, ft).log.test_accuracy;

  const auto clustered = convert_lora2emoe(setup.base, cluster_blocks(setup.base, cfg.n_experts, s.cluster),
                                           cfg.top_k);
  const auto randomised =
      convert_lora2emoe(setup.base, random_blocks(setup.base, cfg.n_experts, s.random_split), cfg.top_k);

  auto top = train(clustered, target, ft);
  out.top = top.log.test_accuracy;
  out.random_top = train(randomised, target, ft).log.test_accuracy;
  auto ft_bottom = ft;
  ft_bottom.policy = SelectionPolicy::bottom();
  out.bottom = train(clustered, target, ft_bottom).log.test_accuracy;

  const auto merged = convert_emoe2lora(top.model);
  out.top_merged = accuracy(merged, target.test());
  std::vector<Partition> parts;
  for (const auto& b : top.model.blocks) parts.push_back(std::get<EmoeLayer<double>>(b.layer).partition());
  out.conversions_bitwise =
      bitwise_equal(convert_lora2emoe(merged, parts, cfg.top_k), top.model) &&
      bitwise_equal(convert_emoe2lora(clustered), setup.base);
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct TransferSummary {
  std::vector<TransferOutcome> runs;
  double dense = 0.0, top = 0.0, bottom = 0.0, random_top = 0.0, top_merged = 0.0;
};

inline TransferSummary summarize(std::vector<TransferOutcome> runs) {
  TransferSummary s;
  auto pick = [&](double TransferOutcome::*field) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.*field);
    return median(std::move(v));
  };
  s.dense = pick(&TransferOutcome::dense);
  s.top = pick(&TransferOutcome::top);
  s.bottom = pick(&TransferOutcome::bottom);
  s.random_top = pick(&TransferOutcome::random_top);
  s.top_merged = pick(&TransferOutcome::top_merged);
  s.runs = std::move(runs);
  return s;
}

}  // namespace emoe
