// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Sparse mixture-of-experts view of a dense FFN. Each expert owns a subset
// of the neurons; the avg-k gate column of an expert is the mean of its key
// vectors, so x * G[:, i] is (N/d) times the sum of that expert's
// pre-activations.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emoe/clustering.hpp"
#include "emoe/error.hpp"
#include "emoe/ffn.hpp"
#include "emoe/numerics.hpp"

namespace emoe {

enum class GateMode : std::uint8_t { AvgK = 0, Learned = 1 };

inline std::string_view to_string(GateMode mode) {
  return mode == GateMode::AvgK ? "avgk" : "learned";
}

struct SelectionPolicy {
  enum class Kind : std::uint8_t { TopK, BottomK, NotTopK, RandomK, All };

  Kind kind = Kind::TopK;
  std::uint64_t seed = 0;  // RandomK only

  static constexpr SelectionPolicy top() { return {Kind::TopK, 0}; }
  static constexpr SelectionPolicy bottom() { return {Kind::BottomK, 0}; }
  static constexpr SelectionPolicy not_top() { return {Kind::NotTopK, 0}; }
  static constexpr SelectionPolicy random(std::uint64_t seed) { return {Kind::RandomK, seed}; }
  static constexpr SelectionPolicy all() { return {Kind::All, 0}; }

  friend bool operator==(const SelectionPolicy&, const SelectionPolicy&) = default;
};

inline std::string_view to_string(SelectionPolicy::Kind kind) {
  switch (kind) {
    case SelectionPolicy::Kind::TopK: return "top";
    case SelectionPolicy::Kind::BottomK: return "bottom";
    case SelectionPolicy::Kind::NotTopK: return "nottop";
    case SelectionPolicy::Kind::RandomK: return "random";
    case SelectionPolicy::Kind::All: return "all";
  }
  return "?";
}

/// Parses top|bottom|nottop|random|all.
inline SelectionPolicy parse_policy(std::string_view name, std::uint64_t seed = 0) {
  if (name == "top") return SelectionPolicy::top();
  if (name == "bottom") return SelectionPolicy::bottom();
  if (name == "nottop") return SelectionPolicy::not_top();
  if (name == "random") return SelectionPolicy::random(seed);
  if (name == "all") return SelectionPolicy::all();
  throw ArgumentError("unknown selection policy '" + std::string(name) + "'");
}

/// Experts chosen for one input. Indices are ascending.
template <Real T>
std::vector<std::size_t> select_experts(std::span<const T> scores, SelectionPolicy policy,
                                        std::size_t k) {
  const std::size_t n = scores.size();
  using Kind = SelectionPolicy::Kind;
  if (policy.kind == Kind::All) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return all;
  }
  if (k < 1 || k > n) {
    throw ArgumentError("select: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) +
                        "]");
  }
  switch (policy.kind) {
    case Kind::TopK:
      return topk_indices(scores, k);
    case Kind::BottomK:
      return bottomk_indices(scores, k);
    case Kind::NotTopK: {
      if (k == n) throw ArgumentError("select: not-top-k needs k < N");
      const auto top = topk_indices(scores, k);
      std::vector<std::size_t> rest;
      rest.reserve(n - k);
      for (std::size_t i = 0, t = 0; i < n; ++i) {
        if (t < top.size() && top[t] == i) {
          ++t;
        } else {
          rest.push_back(i);
        }
      }
      return rest;
    }
    case Kind::RandomK: {
      Rng rng(policy.seed);
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      for (std::size_t i = 0; i < k; ++i) {
        std::swap(idx[i], idx[i + rng.uniform_index(n - i)]);
      }
      idx.resize(k);
      std::sort(idx.begin(), idx.end());
      return idx;
    }
    case Kind::All:
      break;
  }
  return {};
}

template <Real T>
struct Expert {
  std::vector<std::size_t> neurons;  // original neuron indices, ascending
  Matrix<T> keys;                    // h x m
  Matrix<T> values;                  // m x h
  std::vector<T> key_bias;           // m, or empty

  std::size_t size() const noexcept { return neurons.size(); }
};

template <Real T>
class EmoeLayer {
 public:
  EmoeLayer() = default;

  EmoeLayer(std::vector<Expert<T>> experts, Matrix<T> gate, ActivationKind activation,
            std::size_t top_k, GateMode gate_mode, std::vector<T> value_bias = {},
            std::vector<T> gate_bias = {})
      : experts_(std::move(experts)),
        gate_(std::move(gate)),
        activation_(activation),
        top_k_(top_k),
        gate_mode_(gate_mode),
        value_bias_(std::move(value_bias)),
        gate_bias_(std::move(gate_bias)) {
    validate();
  }

  std::size_t h() const noexcept { return gate_.rows(); }
  std::size_t n_experts() const noexcept { return experts_.size(); }
  std::size_t expert_size() const noexcept { return experts_.empty() ? 0 : experts_[0].size(); }
  std::size_t d() const noexcept { return n_experts() * expert_size(); }
  std::size_t top_k() const noexcept { return top_k_; }
  ActivationKind activation() const noexcept { return activation_; }
  GateMode gate_mode() const noexcept { return gate_mode_; }

  void set_top_k(std::size_t k) {
    if (k < 1 || k > n_experts()) throw ArgumentError("top_k outside [1, N]");
    top_k_ = k;
  }

  const std::vector<Expert<T>>& experts() const noexcept { return experts_; }
  const Expert<T>& expert(std::size_t i) const { return experts_.at(i); }
  /// Mutable access for training. In AvgK mode call refresh_gate() after
  /// changing keys.
  Expert<T>& mutable_expert(std::size_t i) { return experts_.at(i); }

  const Matrix<T>& gate() const noexcept { return gate_; }
  Matrix<T>& mutable_gate() noexcept { return gate_; }
  std::span<const T> gate_bias() const noexcept { return gate_bias_; }
  std::span<const T> value_bias() const noexcept { return value_bias_; }
  bool has_key_bias() const noexcept { return !experts_.empty() && !experts_[0].key_bias.empty(); }

  /// Recomputes the avg-k gate (and its bias, when key biases exist) from
  /// the current expert keys.
  void refresh_gate() {
    gate_ = average_keys(experts_, h());
    if (has_key_bias()) {
      gate_bias_.assign(n_experts(), T{0});
      for (std::size_t i = 0; i < n_experts(); ++i) {
        accum_t<T> acc{0};
        for (T b : experts_[i].key_bias) acc += b;
        gate_bias_[i] = static_cast<T>(acc / static_cast<accum_t<T>>(experts_[i].size()));
      }
    }
  }

  Partition partition() const {
    std::vector<std::uint32_t> assignment(d());
    for (std::size_t i = 0; i < n_experts(); ++i) {
      for (auto j : experts_[i].neurons) {
        if (j >= assignment.size()) throw ConstraintError("expert neuron index out of range");
        assignment[j] = static_cast<std::uint32_t>(i);
      }
    }
    return Partition(std::move(assignment), n_experts());
  }

  /// Mean of each expert's key columns, one gate column per expert.
  static Matrix<T> average_keys(const std::vector<Expert<T>>& experts, std::size_t h) {
    Matrix<T> gate(h, experts.size());
    for (std::size_t i = 0; i < experts.size(); ++i) {
      const auto& k = experts[i].keys;
      for (std::size_t r = 0; r < h; ++r) {
        accum_t<T> acc{0};
        for (T v : k.row(r)) acc += v;
        gate(r, i) = static_cast<T>(acc / static_cast<accum_t<T>>(k.cols()));
      }
    }
    return gate;
  }

  friend bool bitwise_equal(const EmoeLayer& a, const EmoeLayer& b) noexcept {
    if (a.n_experts() != b.n_experts() || a.activation_ != b.activation_ ||
        a.top_k_ != b.top_k_ || a.gate_mode_ != b.gate_mode_ ||
        !bitwise_equal(a.gate_, b.gate_) || !bitwise_equal<T>(a.gate_bias_, b.gate_bias_) ||
        !bitwise_equal<T>(a.value_bias_, b.value_bias_)) {
      return false;
    }
    for (std::size_t i = 0; i < a.n_experts(); ++i) {
      const auto& x = a.experts_[i];
      const auto& y = b.experts_[i];
      if (x.neurons != y.neurons || !bitwise_equal(x.keys, y.keys) ||
          !bitwise_equal(x.values, y.values) || !bitwise_equal<T>(x.key_bias, y.key_bias)) {
        return false;
      }
    }
    return true;
  }

 private:
  void validate() const {
    if (experts_.empty()) throw ArgumentError("emoe: no experts");
    const std::size_t hh = gate_.rows();
    const std::size_t m = experts_[0].size();
    if (hh == 0 || m == 0) throw ShapeError("emoe: empty expert");
    if (gate_.cols() != experts_.size()) throw ShapeError("emoe: gate has wrong column count");
    const bool key_bias = !experts_[0].key_bias.empty();
    for (const auto& e : experts_) {
      if (e.size() != m) throw ConstraintError("emoe: experts differ in size");
      if (e.keys.rows() != hh || e.keys.cols() != m || e.values.rows() != m ||
          e.values.cols() != hh) {
        throw ShapeError("emoe: expert weight shapes do not match h=" + std::to_string(hh) +
                         ", m=" + std::to_string(m));
      }
      if (key_bias ? e.key_bias.size() != m : !e.key_bias.empty()) {
        throw ShapeError("emoe: inconsistent expert key bias");
      }
      if (!std::is_sorted(e.neurons.begin(), e.neurons.end())) {
        throw ConstraintError("emoe: expert neuron indices must be ascending");
      }
    }
    (void)partition();  // disjoint and exhaustive over [0, d)
    if (top_k_ < 1 || top_k_ > experts_.size()) throw ArgumentError("emoe: top_k outside [1, N]");
    if (!value_bias_.empty() && value_bias_.size() != hh) throw ShapeError("emoe: value bias");
    if (!gate_bias_.empty() && gate_bias_.size() != experts_.size()) {
      throw ShapeError("emoe: gate bias");
    }
  }

  std::vector<Expert<T>> experts_;
  Matrix<T> gate_;
  ActivationKind activation_ = ActivationKind::ReLU;
  std::size_t top_k_ = 1;
  GateMode gate_mode_ = GateMode::AvgK;
  std::vector<T> value_bias_;
  std::vector<T> gate_bias_;
};

/// Splits a dense layer into experts along `partition`. The learned gate
/// starts from the avg-k values.
template <Real T>
EmoeLayer<T> split(const FfnLayer<T>& layer, const Partition& partition, std::size_t top_k,
                   GateMode gate_mode = GateMode::AvgK) {
  if (partition.d() != layer.d()) {
    throw ConstraintError("split: partition covers " + std::to_string(partition.d()) +
                          " neurons, layer has " + std::to_string(layer.d()));
  }
  const std::size_t h = layer.h();
  const auto& K = layer.keys();
  const auto& V = layer.values();
  const auto kb = layer.key_bias();

  std::vector<Expert<T>> experts;
  experts.reserve(partition.n_experts());
  for (auto& members : partition.groups()) {
    Expert<T> e;
    const std::size_t m = members.size();
    e.keys = Matrix<T>(h, m);
    e.values = Matrix<T>(m, h);
    for (std::size_t c = 0; c < m; ++c) {
      const std::size_t j = members[c];
      for (std::size_t r = 0; r < h; ++r) e.keys(r, c) = K(r, j);
      std::copy(V.row(j).begin(), V.row(j).end(), e.values.row(c).begin());
      if (!kb.empty()) e.key_bias.push_back(kb[j]);
    }
    e.neurons = std::move(members);
    experts.push_back(std::move(e));
  }
  if (top_k < 1 || top_k > experts.size()) throw ArgumentError("split: top_k outside [1, N]");

  auto gate = EmoeLayer<T>::average_keys(experts, h);
  EmoeLayer<T> out(std::move(experts), std::move(gate), layer.activation(), top_k, gate_mode,
                   std::vector<T>(layer.value_bias().begin(), layer.value_bias().end()));
  if (!kb.empty()) out.refresh_gate();
  return out;
}

/// x * G (+ gate bias).
template <Real T>
std::vector<T> gate_scores(const EmoeLayer<T>& layer, std::span<const T> x) {
  if (x.size() != layer.h()) {
    throw ShapeError("emoe: input length " + std::to_string(x.size()) + " != h=" +
                     std::to_string(layer.h()));
  }
  auto s = vec_mat<T>(x, layer.gate());
  const auto gb = layer.gate_bias();
  if (!gb.empty()) {
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += gb[i];
  }
  return s;
}

/// Pre-activations x * K^i (+ b_k^i) of one expert.
template <Real T>
std::vector<T> expert_pre_activations(const EmoeLayer<T>& layer, std::size_t i,
                                      std::span<const T> x) {
  const auto& e = layer.expert(i);
  auto a = vec_mat<T>(x, e.keys);
  if (!e.key_bias.empty()) {
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += e.key_bias[j];
  }
  return a;
}

/// Mixing weights for the selected experts: 1 each for avg-k, softmax over
/// the selected scores for a learned gate.
template <Real T>
std::vector<T> selection_weights(GateMode mode, std::span<const T> scores,
                                 std::span<const std::size_t> selected) {
  std::vector<T> w(selected.size(), T{1});
  if (mode == GateMode::AvgK || selected.empty()) return w;
  T max_score = scores[selected[0]];
  for (auto i : selected) max_score = std::max(max_score, scores[i]);
  accum_t<T> total{0};
  for (std::size_t s = 0; s < selected.size(); ++s) {
    w[s] = std::exp(scores[selected[s]] - max_score);
    total += w[s];
  }
  for (auto& v : w) v = static_cast<T>(v / total);
  return w;
}

template <Real T>
struct EmoeOutput {
  std::vector<T> y;
  std::vector<std::size_t> selected;
  std::vector<T> scores;
};

/// Sparse forward. `k == 0` uses the layer's stored top_k. Experts are
/// accumulated in ascending index order.
template <Real T>
EmoeOutput<T> emoe_forward(const EmoeLayer<T>& layer, std::span<const T> x,
                           SelectionPolicy policy = SelectionPolicy::top(), std::size_t k = 0) {
  EmoeOutput<T> out;
  out.scores = gate_scores(layer, x);
  out.selected = select_experts<T>(out.scores, policy, k == 0 ? layer.top_k() : k);
  const auto weights = selection_weights<T>(layer.gate_mode(), out.scores, out.selected);

  std::vector<accum_t<T>> acc(layer.h(), accum_t<T>{0});
  for (std::size_t s = 0; s < out.selected.size(); ++s) {
    const auto& e = layer.expert(out.selected[s]);
    const auto pre = expert_pre_activations(layer, out.selected[s], x);
    for (std::size_t j = 0; j < pre.size(); ++j) {
      accum_t<T> a = activate<accum_t<T>>(layer.activation(), pre[j]);
      if (a == accum_t<T>{0}) continue;
      if (layer.gate_mode() == GateMode::Learned) a *= weights[s];
      const auto vrow = e.values.row(j);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += a * vrow[c];
    }
  }
  const auto vb = layer.value_bias();
  out.y.resize(layer.h());
  for (std::size_t c = 0; c < acc.size(); ++c) {
    out.y[c] = static_cast<T>(vb.empty() ? acc[c] : acc[c] + vb[c]);
  }
  return out;
}

/// Writes every expert's neurons back to their original positions.
template <Real T>
FfnLayer<T> merge(const EmoeLayer<T>& layer) {
  const std::size_t d = layer.d();
  const std::size_t h = layer.h();
  std::vector<bool> seen(d, false);
  Matrix<T> K(h, d);
  Matrix<T> V(d, h);
  std::vector<T> kb(layer.has_key_bias() ? d : 0);
  for (const auto& e : layer.experts()) {
    if (e.neurons.size() != e.keys.cols()) throw ConstraintError("merge: corrupted expert");
    for (std::size_t c = 0; c < e.neurons.size(); ++c) {
      const std::size_t j = e.neurons[c];
      if (j >= d || seen[j]) {
        throw ConstraintError("merge: neuron index " + std::to_string(j) +
                              " is out of range or duplicated");
      }
      seen[j] = true;
      for (std::size_t r = 0; r < h; ++r) K(r, j) = e.keys(r, c);
      std::copy(e.values.row(c).begin(), e.values.row(c).end(), V.row(j).begin());
      if (!kb.empty()) kb[j] = e.key_bias[c];
    }
  }
  return FfnLayer<T>(std::move(K), std::move(V), layer.activation(), std::move(kb),
                     std::vector<T>(layer.value_bias().begin(), layer.value_bias().end()));
}

/// Keeps only the listed experts. Surviving neurons are renumbered densely
/// in their original relative order; top_k is clamped to the new N.
template <Real T>
EmoeLayer<T> prune(const EmoeLayer<T>& layer, std::vector<std::size_t> keep) {
  if (keep.empty()) throw ArgumentError("prune: keep set is empty");
  std::sort(keep.begin(), keep.end());
  if (std::adjacent_find(keep.begin(), keep.end()) != keep.end()) {
    throw ArgumentError("prune: duplicate expert in keep set");
  }
  if (keep.back() >= layer.n_experts()) {
    throw ArgumentError("prune: expert " + std::to_string(keep.back()) + " does not exist");
  }

  std::vector<std::size_t> kept_neurons;
  for (auto i : keep) {
    const auto& n = layer.expert(i).neurons;
    kept_neurons.insert(kept_neurons.end(), n.begin(), n.end());
  }
  std::sort(kept_neurons.begin(), kept_neurons.end());
  auto renumber = [&](std::size_t j) {
    return static_cast<std::size_t>(
        std::lower_bound(kept_neurons.begin(), kept_neurons.end(), j) - kept_neurons.begin());
  };

  std::vector<Expert<T>> experts;
  Matrix<T> gate(layer.h(), keep.size());
  std::vector<T> gate_bias;
  for (std::size_t c = 0; c < keep.size(); ++c) {
    Expert<T> e = layer.expert(keep[c]);
    for (auto& j : e.neurons) j = renumber(j);
    experts.push_back(std::move(e));
    for (std::size_t r = 0; r < layer.h(); ++r) gate(r, c) = layer.gate()(r, keep[c]);
    if (!layer.gate_bias().empty()) gate_bias.push_back(layer.gate_bias()[keep[c]]);
  }
  const std::size_t top_k = std::min(layer.top_k(), keep.size());
  return EmoeLayer<T>(std::move(experts), std::move(gate), layer.activation(), top_k,
                      layer.gate_mode(),
                      std::vector<T>(layer.value_bias().begin(), layer.value_bias().end()),
                      std::move(gate_bias));
}

}  // namespace emoe
