// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Split a random dense layer into experts, route one input, and merge back.

#include <iostream>

#include "emoe/clustering.hpp"
#include "emoe/emoe_layer.hpp"
#include "emoe/ffn.hpp"
#include "emoe/stats.hpp"

int main() {
  using namespace emoe;
  Rng rng(7);
  const FfnLayer<float> dense(random_normal<float>(16, 64, 1.0, rng), random_normal<float>(64, 16, 1.0, rng),
                              ActivationKind::GeluTanh);

  const auto clusters = cluster_keys(dense, 8, 42);
  std::cout << "objective " << clusters.report.objective_per_iteration.back() << " after "
            << clusters.report.iterations << " iterations\n";

  const auto moe = split(dense, clusters.partition, 2);
  std::vector<float> x(16);
  for (auto& v : x) v = static_cast<float>(rng.normal());

  const auto out = emoe_forward<float>(moe, x);
  std::cout << "selected";
  for (auto e : out.selected) std::cout << ' ' << e;
  std::cout << '\n';

  const auto r = activation_ratios<float>(moe, x, out.selected);
  std::cout << "plain ratio " << r.plain << ", weighted ratio " << r.weighted << '\n';

  const auto all = emoe_forward<float>(moe, x, SelectionPolicy::top(), 8);
  std::cout << "k=N max rel err vs dense "
            << max_relative_error<float>(all.y, ffn_forward<float>(dense, x)) << '\n';
  std::cout << "merge restores the layer: " << (bitwise_equal(merge(moe), dense) ? "yes" : "no") << '\n';

  const auto f = flops_report(16, 64, 8, 2);
  std::cout << "sparse/dense MACs " << f.ratio << '\n';
}
