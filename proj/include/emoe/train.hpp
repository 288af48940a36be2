// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy fine-tuning harness: a linear input projection (with an optional
// low-rank adapter), a stack of dense or split FFN blocks, and a linear
// classification head. Gradients are written out by hand; expert selection
// is held constant in the backward pass.
//
// Everything here runs in double precision.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "emoe/clustering.hpp"
#include "emoe/emoe_layer.hpp"
#include "emoe/error.hpp"
#include "emoe/ffn.hpp"
#include "emoe/numerics.hpp"
#include "emoe/stats.hpp"

namespace emoe {

// ---------------------------------------------------------------------------
// Model

struct LoraAdapter {
  Matrix<double> a;  // r x h_in
  Matrix<double> b;  // h x r
  double alpha = 1.0;

  std::size_t rank() const noexcept { return a.rows(); }
  double scale() const noexcept { return alpha / static_cast<double>(rank()); }
};

using BlockLayer = std::variant<FfnLayer<double>, EmoeLayer<double>>;

struct Block {
  BlockLayer layer;
  bool residual = true;

  bool is_split() const noexcept { return std::holds_alternative<EmoeLayer<double>>(layer); }
  std::size_t h() const {
    return std::visit([](const auto& l) { return l.h(); }, layer);
  }
};

enum class ParamGroup : std::uint8_t { InputProj = 0, Adapter = 1, Ffn = 2, Gate = 3, Head = 4 };

inline std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::InputProj: return "input_proj";
    case ParamGroup::Adapter: return "adapter";
    case ParamGroup::Ffn: return "ffn";
    case ParamGroup::Gate: return "gate";
    case ParamGroup::Head: return "head";
  }
  return "?";
}

struct TrainableGroups {
  bool input_proj = true;
  bool adapter = true;
  bool ffn = true;
  bool gate = true;
  bool head = true;

  bool operator()(ParamGroup g) const noexcept {
    switch (g) {
      case ParamGroup::InputProj: return input_proj;
      case ParamGroup::Adapter: return adapter;
      case ParamGroup::Ffn: return ffn;
      case ParamGroup::Gate: return gate;
      case ParamGroup::Head: return head;
    }
    return false;
  }

  friend bool operator==(const TrainableGroups&, const TrainableGroups&) = default;
};

/// Biases inside FFN blocks are carried along but never trained.
struct ToyModel {
  Matrix<double> input_proj;  // h x h_in
  std::optional<LoraAdapter> adapter;
  std::vector<Block> blocks;
  Matrix<double> head;  // n_classes x h
  TrainableGroups trainable;
  /// Bumped by every in-place update; forward caches remember it.
  std::uint64_t revision = 0;

  std::size_t h_in() const noexcept { return input_proj.cols(); }
  std::size_t h() const noexcept { return input_proj.rows(); }
  std::size_t n_classes() const noexcept { return head.rows(); }

  void touch() noexcept { ++revision; }

  /// input_proj + (alpha / r) * b * a.
  Matrix<double> effective_input_proj() const {
    if (!adapter) return input_proj;
    Matrix<double> w = input_proj;
    const auto& A = adapter->a;
    const auto& B = adapter->b;
    const double s = adapter->scale();
    for (std::size_t r = 0; r < w.rows(); ++r) {
      for (std::size_t c = 0; c < w.cols(); ++c) {
        double acc = 0.0;
        for (std::size_t t = 0; t < A.rows(); ++t) acc += B(r, t) * A(t, c);
        w(r, c) += s * acc;
      }
    }
    return w;
  }

  void validate() const {
    if (input_proj.empty()) throw ShapeError("model: empty input projection");
    if (head.cols() != h() || head.rows() == 0) throw ShapeError("model: head must be n_classes x h");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (blocks[b].h() != h()) {
        throw ShapeError("model: block " + std::to_string(b) + " width " +
                         std::to_string(blocks[b].h()) + " != h=" + std::to_string(h()));
      }
    }
    if (adapter) {
      const auto r = adapter->rank();
      if (r == 0 || adapter->a.cols() != h_in() || adapter->b.rows() != h() ||
          adapter->b.cols() != r) {
        throw ShapeError("model: adapter shapes do not match");
      }
    }
  }
};

inline bool bitwise_equal(const Block& a, const Block& b) noexcept {
  if (a.residual != b.residual || a.layer.index() != b.layer.index()) return false;
  if (a.is_split()) {
    return bitwise_equal(std::get<EmoeLayer<double>>(a.layer), std::get<EmoeLayer<double>>(b.layer));
  }
  return bitwise_equal(std::get<FfnLayer<double>>(a.layer), std::get<FfnLayer<double>>(b.layer));
}

/// Structure and every parameter bit; the revision counter is ignored.
inline bool bitwise_equal(const ToyModel& a, const ToyModel& b) noexcept {
  if (!bitwise_equal(a.input_proj, b.input_proj) || !bitwise_equal(a.head, b.head) ||
      a.trainable != b.trainable || a.adapter.has_value() != b.adapter.has_value() ||
      a.blocks.size() != b.blocks.size()) {
    return false;
  }
  if (a.adapter) {
    const auto& x = *a.adapter;
    const auto& y = *b.adapter;
    if (!bitwise_equal(x.a, y.a) || !bitwise_equal(x.b, y.b) ||
        std::bit_cast<std::uint64_t>(x.alpha) != std::bit_cast<std::uint64_t>(y.alpha)) {
      return false;
    }
  }
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    if (!bitwise_equal(a.blocks[i], b.blocks[i])) return false;
  }
  return true;
}

struct ToyModelConfig {
  std::size_t h_in = 16;
  std::size_t h = 16;
  std::size_t d = 64;
  std::size_t n_classes = 4;
  std::size_t n_blocks = 1;
  ActivationKind activation = ActivationKind::ReLU;
  bool residual = true;
  std::uint64_t seed = 0;
};

/// Dense blocks, scaled Gaussian initialisation, no adapter.
inline ToyModel make_toy_model(const ToyModelConfig& cfg) {
  if (cfg.h_in == 0 || cfg.h == 0 || cfg.d == 0 || cfg.n_classes == 0) {
    throw ArgumentError("toy model: dimensions must be positive");
  }
  Rng rng(cfg.seed);
  ToyModel m;
  m.input_proj = random_normal<double>(cfg.h, cfg.h_in, 1.0 / std::sqrt(double(cfg.h_in)), rng);
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    auto K = random_normal<double>(cfg.h, cfg.d, 1.0 / std::sqrt(double(cfg.h)), rng);
    auto V = random_normal<double>(cfg.d, cfg.h, 1.0 / std::sqrt(double(cfg.d)), rng);
    m.blocks.push_back({FfnLayer<double>(std::move(K), std::move(V), cfg.activation), cfg.residual});
  }
  m.head = random_normal<double>(cfg.n_classes, cfg.h, 1.0 / std::sqrt(double(cfg.h)), rng);
  m.validate();
  return m;
}

/// Attaches a rank-r adapter: a is Gaussian, b starts at zero so the
/// effective projection is unchanged.
inline void add_adapter(ToyModel& model, std::size_t rank, double alpha, std::uint64_t seed) {
  if (rank == 0) throw ArgumentError("adapter rank must be positive");
  if (model.adapter) throw StateError("model already has an adapter");
  Rng rng(seed);
  model.adapter = LoraAdapter{
      random_normal<double>(rank, model.h_in(), 1.0 / std::sqrt(double(model.h_in())), rng),
      Matrix<double>(model.h(), rank), alpha};
  model.touch();
}

// ---------------------------------------------------------------------------
// Parameter enumeration

/// Calls f(group, name, matrix) for every parameter matrix in a fixed
/// order: input projection, adapter, blocks, head. In avg-k mode the gate
/// is derived from the keys and is not a parameter.
template <typename Model, typename F>
  requires std::is_same_v<std::remove_const_t<Model>, ToyModel>
void for_each_parameter(Model& model, F&& f) {
  f(ParamGroup::InputProj, std::string("input_proj"), model.input_proj);
  if (model.adapter) {
    f(ParamGroup::Adapter, std::string("adapter.a"), model.adapter->a);
    f(ParamGroup::Adapter, std::string("adapter.b"), model.adapter->b);
  }
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    auto& layer = model.blocks[b].layer;
    if (auto* ffn = std::get_if<FfnLayer<double>>(&layer)) {
      if constexpr (std::is_const_v<Model>) {
        f(ParamGroup::Ffn, p + "K", ffn->keys());
        f(ParamGroup::Ffn, p + "V", ffn->values());
      } else {
        f(ParamGroup::Ffn, p + "K", ffn->mutable_keys());
        f(ParamGroup::Ffn, p + "V", ffn->mutable_values());
      }
    } else {
      auto& moe = std::get<EmoeLayer<double>>(layer);
      for (std::size_t i = 0; i < moe.n_experts(); ++i) {
        const auto s = std::to_string(i);
        if constexpr (std::is_const_v<Model>) {
          f(ParamGroup::Ffn, p + "K_" + s, moe.expert(i).keys);
          f(ParamGroup::Ffn, p + "V_" + s, moe.expert(i).values);
        } else {
          f(ParamGroup::Ffn, p + "K_" + s, moe.mutable_expert(i).keys);
          f(ParamGroup::Ffn, p + "V_" + s, moe.mutable_expert(i).values);
        }
      }
      if (moe.gate_mode() == GateMode::Learned) {
        if constexpr (std::is_const_v<Model>) {
          f(ParamGroup::Gate, p + "G", moe.gate());
        } else {
          f(ParamGroup::Gate, p + "G", moe.mutable_gate());
        }
      }
    }
  }
  f(ParamGroup::Head, std::string("head"), model.head);
}

/// One entry per parameter matrix, in enumeration order. Entries of frozen
/// groups stay zero.
struct Gradients {
  std::vector<std::string> names;
  std::vector<ParamGroup> groups;
  std::vector<Matrix<double>> values;

  const Matrix<double>& at(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return values[i];
    }
    throw ArgumentError("no parameter named '" + std::string(name) + "'");
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values) n += v.size();
    return n;
  }
};

inline Gradients zero_gradients(const ToyModel& model) {
  Gradients g;
  for_each_parameter(model, [&](ParamGroup group, std::string name, const Matrix<double>& m) {
    g.names.push_back(std::move(name));
    g.groups.push_back(group);
    g.values.emplace_back(m.rows(), m.cols());
  });
  return g;
}

// ---------------------------------------------------------------------------
// Forward and backward

struct BlockCache {
  std::vector<double> input;
  std::vector<double> pre;  // dense: all d neurons; split: selected experts back to back
  std::vector<std::size_t> selected;
  std::vector<double> scores;
  std::vector<double> weights;
};

struct ForwardCache {
  std::uint64_t revision = 0;
  std::vector<double> x;
  std::vector<BlockCache> blocks;
  std::vector<double> hidden;  // input to the head
  std::vector<double> logits;
};

namespace detail {

inline std::vector<double> ffn_block_forward(const FfnLayer<double>& layer, std::span<const double> u,
                                             BlockCache& cache) {
  cache.pre = pre_activations(layer, u);
  return ffn_forward(layer, u);
}

inline std::vector<double> split_block_forward(const EmoeLayer<double>& layer,
                                               std::span<const double> u, SelectionPolicy policy,
                                               std::size_t k, BlockCache& cache) {
  auto out = emoe_forward(layer, u, policy, k);
  cache.pre.clear();
  for (auto i : out.selected) {
    const auto pre = expert_pre_activations(layer, i, u);
    cache.pre.insert(cache.pre.end(), pre.begin(), pre.end());
  }
  cache.weights = selection_weights<double>(layer.gate_mode(), out.scores, out.selected);
  cache.selected = std::move(out.selected);
  cache.scores = std::move(out.scores);
  return std::move(out.y);
}

inline ForwardCache forward_with(const ToyModel& model, const Matrix<double>& w,
                                 std::span<const double> x, SelectionPolicy policy,
                                 std::size_t k) {
  if (x.size() != model.h_in()) {
    throw ShapeError("model: input length " + std::to_string(x.size()) + " != h_in=" +
                     std::to_string(model.h_in()));
  }
  ForwardCache c;
  c.revision = model.revision;
  c.x.assign(x.begin(), x.end());
  auto z = mat_vec<double>(w, x);
  c.blocks.resize(model.blocks.size());
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    auto& bc = c.blocks[b];
    bc.input = z;
    const auto& block = model.blocks[b];
    auto f = block.is_split()
                 ? split_block_forward(std::get<EmoeLayer<double>>(block.layer), z, policy, k, bc)
                 : ffn_block_forward(std::get<FfnLayer<double>>(block.layer), z, bc);
    if (block.residual) {
      for (std::size_t i = 0; i < z.size(); ++i) z[i] += f[i];
    } else {
      z = std::move(f);
    }
  }
  c.hidden = z;
  c.logits = mat_vec<double>(model.head, z);
  return c;
}

/// y += s * a (x) b  (outer product into a matrix).
inline void add_outer(Matrix<double>& m, double s, std::span<const double> a,
                      std::span<const double> b) {
  for (std::size_t r = 0; r < a.size(); ++r) {
    const double ar = s * a[r];
    if (ar == 0.0) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < b.size(); ++c) row[c] += ar * b[c];
  }
}

}  // namespace detail

/// logits = head * blocks(effective_input_proj * x). `k == 0` uses each
/// split block's stored top_k.
inline ForwardCache model_forward(const ToyModel& model, std::span<const double> x,
                                  SelectionPolicy policy = SelectionPolicy::top(),
                                  std::size_t k = 0) {
  return detail::forward_with(model, model.effective_input_proj(), x, policy, k);
}

/// Mean-free softmax cross-entropy of one sample; writes dLoss/dlogits.
inline double softmax_cross_entropy(std::span<const double> logits, std::size_t label,
                                    std::vector<double>& dlogits) {
  if (label >= logits.size()) throw ArgumentError("label outside [0, n_classes)");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    dlogits[i] = std::exp(logits[i] - mx);
    total += dlogits[i];
  }
  for (auto& p : dlogits) p /= total;
  const double loss = -(logits[label] - mx - std::log(total));
  dlogits[label] -= 1.0;
  return loss;
}

/// Adds the gradient of <dlogits, logits> for one cached sample into
/// `grads`. Only selected experts receive gradient.
inline void accumulate_backward(const ToyModel& model, const ForwardCache& cache,
                                std::span<const double> dlogits, Gradients& grads) {
  if (cache.revision != model.revision) {
    throw StateError("backward: cache is from model revision " + std::to_string(cache.revision) +
                     ", model is at " + std::to_string(model.revision));
  }
  if (cache.blocks.size() != model.blocks.size() || dlogits.size() != model.n_classes()) {
    throw ShapeError("backward: cache or dlogits does not match the model");
  }
  const auto& on = model.trainable;
  std::size_t slot = grads.values.size() - 1;  // head is last
  if (on.head) detail::add_outer(grads.values[slot], 1.0, dlogits, cache.hidden);

  // dz = head^T * dlogits
  std::vector<double> dz(model.h(), 0.0);
  for (std::size_t c = 0; c < dlogits.size(); ++c) {
    const auto row = model.head.row(c);
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] += dlogits[c] * row[i];
  }

  // Slot index of the first parameter of each block.
  std::vector<std::size_t> block_slot(model.blocks.size());
  {
    std::size_t s = 1 + (model.adapter ? 2 : 0);
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
      block_slot[b] = s;
      const auto& layer = model.blocks[b].layer;
      if (const auto* moe = std::get_if<EmoeLayer<double>>(&layer)) {
        s += 2 * moe->n_experts() + (moe->gate_mode() == GateMode::Learned ? 1 : 0);
      } else {
        s += 2;
      }
    }
  }

  for (std::size_t bi = model.blocks.size(); bi-- > 0;) {
    const auto& block = model.blocks[bi];
    const auto& bc = cache.blocks[bi];
    const auto& u = bc.input;
    std::vector<double> du(u.size(), 0.0);
    if (block.residual) du = dz;

    if (const auto* ffn = std::get_if<FfnLayer<double>>(&block.layer)) {
      const auto& K = ffn->keys();
      const auto& V = ffn->values();
      auto& gK = grads.values[block_slot[bi]];
      auto& gV = grads.values[block_slot[bi] + 1];
      for (std::size_t j = 0; j < ffn->d(); ++j) {
        const double a = activate<double>(ffn->activation(), bc.pre[j]);
        const auto vrow = V.row(j);
        if (on.ffn && a != 0.0) {
          auto g = gV.row(j);
          for (std::size_t c = 0; c < dz.size(); ++c) g[c] += a * dz[c];
        }
        const double dpre =
            dot<double>(vrow, dz) * activation_derivative<double>(ffn->activation(), bc.pre[j]);
        if (dpre == 0.0) continue;
        for (std::size_t r = 0; r < u.size(); ++r) {
          if (on.ffn) gK(r, j) += u[r] * dpre;
          du[r] += K(r, j) * dpre;
        }
      }
    } else {
      const auto& moe = std::get<EmoeLayer<double>>(block.layer);
      const bool learned = moe.gate_mode() == GateMode::Learned;
      const std::size_t m = moe.expert_size();
      std::vector<double> dw(bc.selected.size(), 0.0);
      for (std::size_t s = 0; s < bc.selected.size(); ++s) {
        const std::size_t i = bc.selected[s];
        const auto& e = moe.expert(i);
        const double w = bc.weights[s];
        auto& gK = grads.values[block_slot[bi] + 2 * i];
        auto& gV = grads.values[block_slot[bi] + 2 * i + 1];
        for (std::size_t j = 0; j < m; ++j) {
          const double p = bc.pre[s * m + j];
          const double a = activate<double>(moe.activation(), p);
          const double vdz = dot<double>(e.values.row(j), dz);
          dw[s] += a * vdz;
          if (on.ffn && a != 0.0) {
            auto g = gV.row(j);
            for (std::size_t c = 0; c < dz.size(); ++c) g[c] += w * a * dz[c];
          }
          const double dpre = w * vdz * activation_derivative<double>(moe.activation(), p);
          if (dpre == 0.0) continue;
          for (std::size_t r = 0; r < u.size(); ++r) {
            if (on.ffn) gK(r, j) += u[r] * dpre;
            du[r] += e.keys(r, j) * dpre;
          }
        }
      }
      if (learned) {
        // Softmax over the selected scores.
        double mean_dw = 0.0;
        for (std::size_t s = 0; s < dw.size(); ++s) mean_dw += bc.weights[s] * dw[s];
        auto& gG = grads.values[block_slot[bi] + 2 * moe.n_experts()];
        const auto& G = moe.gate();
        for (std::size_t s = 0; s < bc.selected.size(); ++s) {
          const std::size_t i = bc.selected[s];
          const double dscore = bc.weights[s] * (dw[s] - mean_dw);
          if (dscore == 0.0) continue;
          for (std::size_t r = 0; r < u.size(); ++r) {
            if (on.gate) gG(r, i) += u[r] * dscore;
            du[r] += G(r, i) * dscore;
          }
        }
      }
    }
    dz = std::move(du);
  }

  // z0 = W x with W = P + s * B * A.
  if (on.input_proj) detail::add_outer(grads.values[0], 1.0, dz, cache.x);
  if (model.adapter && on.adapter) {
    const auto& A = model.adapter->a;
    const auto& B = model.adapter->b;
    const double s = model.adapter->scale();
    const std::size_t r = A.rows();
    // dA = s * B^T dz x^T ; dB = s * dz (A x)^T
    std::vector<double> btdz(r, 0.0);
    for (std::size_t t = 0; t < r; ++t) {
      for (std::size_t i = 0; i < dz.size(); ++i) btdz[t] += B(i, t) * dz[i];
    }
    const auto ax = mat_vec<double>(A, cache.x);
    detail::add_outer(grads.values[1], s, btdz, cache.x);
    detail::add_outer(grads.values[2], s, dz, ax);
  }
}

inline Gradients model_backward(const ToyModel& model, const ForwardCache& cache,
                                std::span<const double> dlogits) {
  auto g = zero_gradients(model);
  accumulate_backward(model, cache, dlogits, g);
  return g;
}

// ---------------------------------------------------------------------------
// Toy data

struct ToyTaskSpec {
  std::size_t n_clusters = 8;
  std::size_t h_in = 16;
  std::size_t n_classes = 4;
  double noise_sigma = 0.5;
  std::size_t samples_per_cluster = 50;
  std::uint64_t seed = 0;
  /// Seeds the cluster-to-label rule; defaults to `seed`. Two specs that
  /// differ only here share inputs but not labels.
  std::optional<std::uint64_t> label_seed;
};

struct Batch {
  Matrix<double> inputs;  // one sample per row
  std::vector<std::uint32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
};

struct Dataset {
  Batch data;
  std::vector<std::uint32_t> clusters;
  std::vector<std::uint32_t> label_of_cluster;
  std::size_t n_classes = 0;
  std::vector<std::size_t> train_index;  // 80%
  std::vector<std::size_t> test_index;   // 20%

  Batch subset(std::span<const std::size_t> index) const {
    Batch b;
    b.inputs = Matrix<double>(index.size(), data.inputs.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
      const auto src = data.inputs.row(index[i]);
      std::copy(src.begin(), src.end(), b.inputs.row(i).begin());
      b.labels.push_back(data.labels[index[i]]);
    }
    return b;
  }
  Batch train() const { return subset(train_index); }
  Batch test() const { return subset(test_index); }
};

/// Centroids lie on a sphere of radius 4 * noise_sigma (radius 1 when the
/// noise is zero); samples are centroid plus isotropic Gaussian noise.
inline Dataset make_toy_dataset(const ToyTaskSpec& task) {
  if (task.n_clusters == 0 || task.h_in == 0 || task.n_classes == 0 ||
      task.samples_per_cluster == 0) {
    throw ArgumentError("toy task: counts must be positive");
  }
  if (!(task.noise_sigma >= 0.0) || !std::isfinite(task.noise_sigma)) {
    throw ArgumentError("toy task: noise_sigma must be finite and non-negative");
  }
  Rng rng(derive_seed(task.seed, 1));
  const double radius = task.noise_sigma > 0.0 ? 4.0 * task.noise_sigma : 1.0;
  Matrix<double> centroids(task.n_clusters, task.h_in);
  for (std::size_t c = 0; c < task.n_clusters; ++c) {
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (auto& v : centroids.row(c)) {
        v = rng.normal();
        norm2 += v * v;
      }
    } while (norm2 == 0.0);
    const double s = radius / std::sqrt(norm2);
    for (auto& v : centroids.row(c)) v *= s;
  }

  Dataset ds;
  ds.n_classes = task.n_classes;
  {
    Rng label_rng(derive_seed(task.label_seed.value_or(task.seed), 2));
    std::vector<std::uint32_t> perm(task.n_clusters);
    std::iota(perm.begin(), perm.end(), 0u);
    label_rng.shuffle(perm.begin(), perm.end());
    for (auto p : perm) ds.label_of_cluster.push_back(p % static_cast<std::uint32_t>(task.n_classes));
  }

  const std::size_t n = task.n_clusters * task.samples_per_cluster;
  ds.data.inputs = Matrix<double>(n, task.h_in);
  Rng noise(derive_seed(task.seed, 3));
  for (std::size_t c = 0, row = 0; c < task.n_clusters; ++c) {
    for (std::size_t s = 0; s < task.samples_per_cluster; ++s, ++row) {
      auto x = ds.data.inputs.row(row);
      const auto mu = centroids.row(c);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = mu[i] + task.noise_sigma * noise.normal();
      ds.clusters.push_back(static_cast<std::uint32_t>(c));
      ds.data.labels.push_back(ds.label_of_cluster[c]);
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split_rng(derive_seed(task.seed, 4));
  split_rng.shuffle(order.begin(), order.end());
  const std::size_t n_test = n / 5;
  ds.test_index.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  ds.train_index.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(ds.test_index.begin(), ds.test_index.end());
  std::sort(ds.train_index.begin(), ds.train_index.end());
  return ds;
}

// ---------------------------------------------------------------------------
// Losses over batches

namespace detail {
inline SelectionPolicy per_sample_policy(SelectionPolicy policy, std::uint64_t token) {
  if (policy.kind == SelectionPolicy::Kind::RandomK) policy.seed = derive_seed(policy.seed, token);
  return policy;
}
}  // namespace detail

/// Mean cross-entropy over a batch.
inline double batch_loss(const ToyModel& model, const Batch& batch,
                         SelectionPolicy policy = SelectionPolicy::top(), std::size_t k = 0) {
  if (batch.size() == 0) throw ArgumentError("empty batch");
  const auto w = model.effective_input_proj();
  double total = 0.0;
  std::vector<double> dl;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto c = detail::forward_with(model, w, batch.inputs.row(i),
                                        detail::per_sample_policy(policy, i), k);
    total += softmax_cross_entropy(c.logits, batch.labels[i], dl);
  }
  return total / static_cast<double>(batch.size());
}

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
  std::vector<ForwardCache> caches;
};

/// Mean loss and its gradient; samples are accumulated in ascending order.
/// `token_base` offsets the per-sample seeds of the random policy.
inline LossAndGradients batch_gradients(const ToyModel& model, const Batch& batch,
                                        SelectionPolicy policy = SelectionPolicy::top(),
                                        std::size_t k = 0, std::uint64_t token_base = 0) {
  if (batch.size() == 0) throw ArgumentError("empty batch");
  LossAndGradients out;
  out.grads = zero_gradients(model);
  const auto w = model.effective_input_proj();
  const double inv = 1.0 / static_cast<double>(batch.size());
  std::vector<double> dl;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto c = detail::forward_with(model, w, batch.inputs.row(i),
                                  detail::per_sample_policy(policy, token_base + i), k);
    out.loss += softmax_cross_entropy(c.logits, batch.labels[i], dl);
    for (auto& v : dl) v *= inv;
    accumulate_backward(model, c, dl, out.grads);
    out.caches.push_back(std::move(c));
  }
  out.loss *= inv;
  return out;
}

inline double accuracy(const ToyModel& model, const Batch& batch,
                       SelectionPolicy policy = SelectionPolicy::top(), std::size_t k = 0) {
  if (batch.size() == 0) throw ArgumentError("empty batch");
  const auto w = model.effective_input_proj();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto c = detail::forward_with(model, w, batch.inputs.row(i),
                                        detail::per_sample_policy(policy, i), k);
    const auto best = static_cast<std::size_t>(
        std::max_element(c.logits.begin(), c.logits.end()) - c.logits.begin());
    correct += best == batch.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Optimisation

enum class OptimizerKind : std::uint8_t { Sgd = 0, Adam = 1 };

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  double learning_rate = 1e-2;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 0;
  SelectionPolicy policy = SelectionPolicy::top();
  std::size_t k = 0;  // 0: each block's stored top_k
  std::size_t log_window = 50;
};

class Optimizer {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  Optimizer(OptimizerKind kind, double learning_rate) : kind_(kind), lr_(learning_rate) {
    if (!std::isfinite(learning_rate) || learning_rate < 0.0) {
      throw ArgumentError("learning rate must be finite and non-negative");
    }
  }

  /// Applies one update to every trainable group, then re-derives avg-k
  /// gates whose keys may have moved.
  void step(ToyModel& model, const Gradients& grads) {
    ++t_;
    std::size_t slot = 0;
    for_each_parameter(model, [&](ParamGroup group, const std::string&, Matrix<double>& p) {
      const std::size_t i = slot++;
      if (!model.trainable(group)) return;
      const auto g = grads.values.at(i).values();
      auto v = p.values();
      if (kind_ == OptimizerKind::Sgd) {
        for (std::size_t j = 0; j < v.size(); ++j) v[j] -= lr_ * g[j];
        return;
      }
      if (m_.size() <= i) {
        m_.resize(i + 1);
        v_.resize(i + 1);
      }
      if (m_[i].size() != v.size()) {
        m_[i].assign(v.size(), 0.0);
        v_[i].assign(v.size(), 0.0);
      }
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
      for (std::size_t j = 0; j < v.size(); ++j) {
        m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * g[j];
        v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * g[j] * g[j];
        const double mh = m_[i][j] / c1;
        const double vh = v_[i][j] / c2;
        v[j] -= lr_ * mh / (std::sqrt(vh) + kEpsilon);
      }
    });
    if (model.trainable.ffn) {
      for (auto& b : model.blocks) {
        if (auto* moe = std::get_if<EmoeLayer<double>>(&b.layer)) {
          if (moe->gate_mode() == GateMode::AvgK) moe->refresh_gate();
        }
      }
    }
    model.touch();
  }

 private:
  OptimizerKind kind_;
  double lr_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

struct UsageWindow {
  std::size_t first_step = 0;
  std::size_t block = 0;
  UsageHistogram histogram;
};

struct TrainLog {
  std::vector<double> loss;  // one entry per step
  std::vector<UsageWindow> usage;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;

  friend bool operator==(const TrainLog& a, const TrainLog& b) {
    if (a.usage.size() != b.usage.size() ||
        !bitwise_equal<double>(a.loss, b.loss) ||
        std::bit_cast<std::uint64_t>(a.train_accuracy) != std::bit_cast<std::uint64_t>(b.train_accuracy) ||
        std::bit_cast<std::uint64_t>(a.test_accuracy) != std::bit_cast<std::uint64_t>(b.test_accuracy)) {
      return false;
    }
    for (std::size_t i = 0; i < a.usage.size(); ++i) {
      const auto& x = a.usage[i];
      const auto& y = b.usage[i];
      if (x.first_step != y.first_step || x.block != y.block ||
          x.histogram.counts != y.histogram.counts ||
          x.histogram.tokens_seen != y.histogram.tokens_seen) {
        return false;
      }
    }
    return true;
  }
};

struct TrainResult {
  ToyModel model;
  TrainLog log;
};

/// Minibatch training on the dataset's training split; batches are drawn
/// from per-epoch shuffles seeded by config.seed. Accuracies are measured
/// with the training policy.
inline TrainResult train(ToyModel model, const Dataset& dataset, const TrainConfig& config) {
  model.validate();
  if (config.batch_size == 0) throw ArgumentError("train: batch_size must be positive");
  if (config.log_window == 0) throw ArgumentError("train: log_window must be positive");
  if (dataset.train_index.empty() || dataset.test_index.empty()) {
    throw ArgumentError("train: dataset needs non-empty train and test splits");
  }
  if (model.h_in() != dataset.data.inputs.cols()) {
    throw ShapeError("train: model h_in " + std::to_string(model.h_in()) + " != data width " +
                     std::to_string(dataset.data.inputs.cols()));
  }
  if (dataset.n_classes > model.n_classes()) throw ShapeError("train: too few output classes");

  Optimizer opt(config.optimizer, config.learning_rate);
  Rng rng(config.seed);
  TrainLog log;
  std::vector<std::size_t> order = dataset.train_index;
  std::size_t cursor = order.size();

  std::vector<std::size_t> split_blocks;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    if (model.blocks[b].is_split()) split_blocks.push_back(b);
  }

  std::vector<std::size_t> batch_index;
  for (std::size_t step = 0; step < config.steps; ++step) {
    batch_index.clear();
    while (batch_index.size() < config.batch_size) {
      if (cursor == order.size()) {
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      batch_index.push_back(order[cursor++]);
    }
    const auto batch = dataset.subset(batch_index);
    auto lg = batch_gradients(model, batch, config.policy, config.k, step * config.batch_size);
    if (!std::isfinite(lg.loss)) throw TrainingError("training diverged: loss is not finite", step);
    log.loss.push_back(lg.loss);

    if (step % config.log_window == 0) {
      for (auto b : split_blocks) {
        const auto& moe = std::get<EmoeLayer<double>>(model.blocks[b].layer);
        const auto k = config.k == 0 ? moe.top_k() : config.k;
        UsageHistogram h;
        h.counts.assign(moe.n_experts(), 0);
        h.k = experts_per_token(config.policy, k, moe.n_experts());
        h.window = log.usage.size() / std::max<std::size_t>(1, split_blocks.size());
        log.usage.push_back({step, b, std::move(h)});
      }
    }
    for (std::size_t s = 0; s < split_blocks.size(); ++s) {
      auto& hist = log.usage[log.usage.size() - split_blocks.size() + s].histogram;
      for (const auto& c : lg.caches) hist.add(c.blocks[split_blocks[s]].selected);
    }
    opt.step(model, lg.grads);
  }

  log.train_accuracy = accuracy(model, dataset.train(), config.policy, config.k);
  log.test_accuracy = accuracy(model, dataset.test(), config.policy, config.k);
  return {std::move(model), std::move(log)};
}

// ---------------------------------------------------------------------------
// Conversions

/// Splits every dense block along its partition. Parameters are copied
/// bitwise.
inline ToyModel convert_lora2emoe(const ToyModel& model, const std::vector<Partition>& partitions,
                                  std::size_t top_k, GateMode gate_mode = GateMode::AvgK) {
  if (partitions.size() != model.blocks.size()) {
    throw ConstraintError("lora2emoe: " + std::to_string(partitions.size()) +
                          " partitions for " + std::to_string(model.blocks.size()) + " blocks");
  }
  ToyModel out = model;
  for (std::size_t b = 0; b < out.blocks.size(); ++b) {
    auto& block = out.blocks[b];
    if (block.is_split()) throw StateError("lora2emoe: block " + std::to_string(b) + " is already split");
    block.layer = split(std::get<FfnLayer<double>>(block.layer), partitions[b], top_k, gate_mode);
  }
  out.touch();
  return out;
}

/// Merges every split block back into a dense FFN.
inline ToyModel convert_emoe2lora(const ToyModel& model) {
  ToyModel out = model;
  for (std::size_t b = 0; b < out.blocks.size(); ++b) {
    auto& block = out.blocks[b];
    if (!block.is_split()) throw StateError("emoe2lora: block " + std::to_string(b) + " is already dense");
    block.layer = merge(std::get<EmoeLayer<double>>(block.layer));
  }
  out.touch();
  return out;
}

/// Partitions from clustering each dense block's keys.
inline std::vector<Partition> cluster_blocks(const ToyModel& model, std::size_t n_experts,
                                             std::uint64_t seed,
                                             const ClusteringOptions& options = {}) {
  std::vector<Partition> out;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto* ffn = std::get_if<FfnLayer<double>>(&model.blocks[b].layer);
    if (!ffn) throw StateError("cluster: block " + std::to_string(b) + " is already split");
    out.push_back(cluster_keys(*ffn, n_experts, derive_seed(seed, b), options).partition);
  }
  return out;
}

inline std::vector<Partition> random_blocks(const ToyModel& model, std::size_t n_experts,
                                            std::uint64_t seed) {
  std::vector<Partition> out;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto* ffn = std::get_if<FfnLayer<double>>(&model.blocks[b].layer);
    if (!ffn) throw StateError("random split: block " + std::to_string(b) + " is already split");
    out.push_back(random_partition(ffn->d(), n_experts, derive_seed(seed, b)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient verification

/// True when every pre-activation is at least `margin` from zero and, for
/// ranked policies, the k-th and (k+1)-th gate scores differ by at least
/// `margin` in every split block. Finite differences are only meaningful
/// on such inputs.
inline bool well_conditioned(const ToyModel& model, std::span<const double> x,
                             SelectionPolicy policy, std::size_t k, double margin = 1e-3) {
  const auto c = model_forward(model, x, policy, k);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto& block = model.blocks[b];
    const auto& u = c.blocks[b].input;
    std::vector<double> pre;
    if (const auto* ffn = std::get_if<FfnLayer<double>>(&block.layer)) {
      pre = pre_activations<double>(*ffn, u);
    } else {
      const auto& moe = std::get<EmoeLayer<double>>(block.layer);
      for (std::size_t i = 0; i < moe.n_experts(); ++i) {
        const auto p = expert_pre_activations<double>(moe, i, u);
        pre.insert(pre.end(), p.begin(), p.end());
      }
      const auto kk = k == 0 ? moe.top_k() : k;
      if (policy.kind != SelectionPolicy::Kind::All && kk < moe.n_experts()) {
        auto s = c.blocks[b].scores;
        std::sort(s.begin(), s.end(), std::greater<>());
        const bool bottom = policy.kind == SelectionPolicy::Kind::BottomK;
        const std::size_t at = bottom ? s.size() - kk : kk;
        if (std::abs(s[at - 1] - s[at]) < margin) return false;
      }
    }
    for (double p : pre) {
      if (std::abs(p) < margin) return false;
    }
  }
  return true;
}

struct GradientCheck {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t scalars_checked = 0;
};

/// Central differences of the mean batch loss against the analytic
/// gradient, over every scalar of every trainable group. Relative error is
/// |a - n| / max(|a|, |n|, 1e-12).
inline GradientCheck finite_diff_check(const ToyModel& model, const Batch& batch, double epsilon,
                                       SelectionPolicy policy = SelectionPolicy::top(),
                                       std::size_t k = 0) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
    throw ArgumentError("finite difference epsilon must be positive");
  }
  const auto analytic = batch_gradients(model, batch, policy, k).grads;
  ToyModel work = model;

  // Perturbing keys also moves avg-k gates; keep them tied while probing.
  auto retie = [&](ToyModel& m) {
    for (auto& b : m.blocks) {
      if (auto* moe = std::get_if<EmoeLayer<double>>(&b.layer)) {
        if (moe->gate_mode() == GateMode::AvgK) moe->refresh_gate();
      }
    }
  };

  GradientCheck out;
  std::size_t slot = 0;
  std::vector<std::pair<std::size_t, std::string>> slots;
  for_each_parameter(work, [&](ParamGroup group, const std::string& name, Matrix<double>&) {
    if (model.trainable(group)) slots.emplace_back(slot, name);
    ++slot;
  });

  for (const auto& [index, name] : slots) {
    for (std::size_t j = 0; j < analytic.values[index].size(); ++j) {
      double original = 0.0;
      {
        std::size_t s = 0;
        for_each_parameter(work, [&](ParamGroup, const std::string&, Matrix<double>& p) {
          if (s++ == index) original = p.values()[j];
        });
      }
      auto set = [&](double value) {
        std::size_t s = 0;
        for_each_parameter(work, [&](ParamGroup, const std::string&, Matrix<double>& p) {
          if (s++ == index) p.values()[j] = value;
        });
        retie(work);
      };
      set(original + epsilon);
      const double up = batch_loss(work, batch, policy, k);
      set(original - epsilon);
      const double down = batch_loss(work, batch, policy, k);
      set(original);

      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic.values[index].values()[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      const double rel = std::abs(a - numeric) / denom;
      ++out.scalars_checked;
      if (rel > out.max_relative_error) {
        out.max_relative_error = rel;
        out.worst_parameter = name;
        out.worst_index = j;
      }
    }
  }
  return out;
}

}  // namespace emoe
