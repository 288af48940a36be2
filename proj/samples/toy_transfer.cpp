// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// One seed of the toy transfer run: dense tuning against expert tuning,
// then merge the tuned experts and evaluate densely.

#include <cstdlib>
#include <iostream>

#include "emoe/experiment.hpp"

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 0;
  const emoe::TransferConfig cfg;
  const auto r = emoe::run_transfer(cfg, seed);
  std::cout << "seed " << r.seed << '\n'
            << "source accuracy " << r.source_accuracy << '\n'
            << "dense tuning " << r.dense << '\n'
            << "top-k tuning " << r.top << '\n'
            << "bottom-k tuning " << r.bottom << '\n'
            << "random split top-k " << r.random_top << '\n'
            << "top-k merged to dense " << r.top_merged << '\n'
            << "conversions bitwise " << (r.conversions_bitwise ? "yes" : "no") << '\n';
}
