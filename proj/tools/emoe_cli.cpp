// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "emoe/cli.hpp"

int main(int argc, char** argv) { return emoe::cli::run(argc, argv, std::cout, std::cerr); }
