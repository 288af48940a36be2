// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Activation ratios, expert usage histograms and per-token MAC accounting.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emoe/clustering.hpp"
#include "emoe/emoe_layer.hpp"
#include "emoe/error.hpp"
#include "emoe/ffn.hpp"
#include "emoe/numerics.hpp"

namespace emoe {

/// A neuron is activated when its pre-activation is strictly positive.
/// `plain` is the share of activated neurons inside the selected experts;
/// `weighted` is the share of post-activation mass (over activated neurons)
/// inside the selected experts. Both are 0 when nothing is activated.
struct ActivationRatios {
  double plain = 0.0;
  double weighted = 0.0;
  std::size_t activated_total = 0;
  std::size_t activated_selected = 0;
};

namespace detail {

template <Real T>
ActivationRatios ratios_from(std::span<const T> pre, ActivationKind kind,
                             std::span<const std::uint32_t> expert_of,
                             std::span<const std::size_t> selected, std::size_t n_experts) {
  std::vector<bool> chosen(n_experts, false);
  for (auto i : selected) {
    if (i >= n_experts) throw ArgumentError("activation ratios: expert id out of range");
    chosen[i] = true;
  }
  ActivationRatios r;
  double mass_total = 0.0;
  double mass_selected = 0.0;
  for (std::size_t j = 0; j < pre.size(); ++j) {
    if (!(pre[j] > T{0})) continue;
    const double a = activate(kind, pre[j]);
    ++r.activated_total;
    mass_total += a;
    if (chosen[expert_of[j]]) {
      ++r.activated_selected;
      mass_selected += a;
    }
  }
  if (r.activated_total > 0) {
    r.plain = static_cast<double>(r.activated_selected) / static_cast<double>(r.activated_total);
  }
  if (mass_total > 0.0) r.weighted = mass_selected / mass_total;
  return r;
}

}  // namespace detail

template <Real T>
ActivationRatios activation_ratios(const FfnLayer<T>& layer, const Partition& partition,
                                   std::span<const T> x, std::span<const std::size_t> selected) {
  if (partition.d() != layer.d()) throw ShapeError("activation ratios: partition size");
  const auto pre = pre_activations(layer, x);
  return detail::ratios_from<T>(pre, layer.activation(), partition.assignment(), selected,
                                partition.n_experts());
}

/// Same quantity computed directly on a split layer.
template <Real T>
ActivationRatios activation_ratios(const EmoeLayer<T>& layer, std::span<const T> x,
                                   std::span<const std::size_t> selected) {
  std::vector<T> pre;
  std::vector<std::uint32_t> expert_of;
  pre.reserve(layer.d());
  for (std::size_t i = 0; i < layer.n_experts(); ++i) {
    const auto a = expert_pre_activations(layer, i, x);
    pre.insert(pre.end(), a.begin(), a.end());
    expert_of.insert(expert_of.end(), a.size(), static_cast<std::uint32_t>(i));
  }
  return detail::ratios_from<T>(pre, layer.activation(), expert_of, selected,
                                layer.n_experts());
}

struct UsageHistogram {
  std::vector<std::uint64_t> counts;
  std::uint64_t tokens_seen = 0;
  std::size_t k = 0;  // experts selected per token
  std::optional<std::size_t> window;

  std::size_t n_experts() const noexcept { return counts.size(); }

  void add(std::span<const std::size_t> selected) {
    for (auto i : selected) ++counts.at(i);
    ++tokens_seen;
  }

  /// Per-token selection frequency of every expert; sums to k.
  std::vector<double> frequencies() const {
    std::vector<double> f(counts.size(), 0.0);
    if (tokens_seen == 0) return f;
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = static_cast<double>(counts[i]) / static_cast<double>(tokens_seen);
    }
    return f;
  }
};

/// Number of experts a policy picks per token.
inline std::size_t experts_per_token(SelectionPolicy policy, std::size_t k, std::size_t n) {
  switch (policy.kind) {
    case SelectionPolicy::Kind::All: return n;
    case SelectionPolicy::Kind::NotTopK: return n - k;
    default: return k;
  }
}

/// Counts how often each expert is selected over `inputs` (one input per
/// row). RandomK draws a fresh selection per row from a seed derived from
/// the policy seed and the row index.
template <Real T>
UsageHistogram usage_histogram(const EmoeLayer<T>& layer, const Matrix<T>& inputs,
                               SelectionPolicy policy, std::size_t k = 0) {
  if (inputs.rows() == 0) throw ArgumentError("usage histogram: no inputs");
  if (k == 0) k = layer.top_k();
  UsageHistogram hist;
  hist.counts.assign(layer.n_experts(), 0);
  hist.k = experts_per_token(policy, k, layer.n_experts());
  for (std::size_t t = 0; t < inputs.rows(); ++t) {
    SelectionPolicy p = policy;
    if (p.kind == SelectionPolicy::Kind::RandomK) p.seed = derive_seed(policy.seed, t);
    const auto scores = gate_scores<T>(layer, inputs.row(t));
    hist.add(select_experts<T>(scores, p, k));
  }
  return hist;
}

/// Rows are tasks, columns experts; cells are per-token selection
/// frequencies (each row sums to k).
struct Heatmap {
  std::vector<std::string> tasks;
  Matrix<double> frequencies;
  Matrix<double> counts;
};

inline Heatmap export_heatmap(const std::vector<std::pair<std::string, UsageHistogram>>& rows) {
  Heatmap out;
  if (rows.empty()) return out;
  const std::size_t n = rows.front().second.n_experts();
  out.frequencies = Matrix<double>(rows.size(), n);
  out.counts = Matrix<double>(rows.size(), n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& [name, hist] = rows[r];
    if (hist.n_experts() != n) {
      throw ConstraintError("heatmap: task '" + name + "' has " +
                            std::to_string(hist.n_experts()) + " experts, expected " +
                            std::to_string(n));
    }
    out.tasks.push_back(name);
    const auto f = hist.frequencies();
    for (std::size_t i = 0; i < n; ++i) {
      out.frequencies(r, i) = f[i];
      out.counts(r, i) = static_cast<double>(hist.counts[i]);
    }
  }
  return out;
}

/// Multiply-accumulates per token.
struct FlopsReport {
  std::uint64_t dense_macs = 0;   // 2 h d
  std::uint64_t sparse_macs = 0;  // 2 h (d/N) k + h N
  std::uint64_t gate_macs = 0;    // h N
  double ratio = 0.0;             // sparse / dense
};

inline FlopsReport flops_report(std::uint64_t h, std::uint64_t d, std::uint64_t n_experts,
                                std::uint64_t k) {
  if (h == 0 || d == 0 || n_experts == 0 || k == 0) {
    throw ArgumentError("flops: h, d, N and k must be positive");
  }
  if (k > n_experts) throw ArgumentError("flops: k exceeds N");
  if (n_experts > d) throw ArgumentError("flops: N exceeds d");
  if (d % n_experts != 0) throw ConstraintError("flops: d not divisible by N");
  FlopsReport r;
  r.dense_macs = 2 * h * d;
  r.gate_macs = h * n_experts;
  r.sparse_macs = 2 * h * (d / n_experts) * k + r.gate_macs;
  r.ratio = static_cast<double>(r.sparse_macs) / static_cast<double>(r.dense_macs);
  return r;
}

}  // namespace emoe
