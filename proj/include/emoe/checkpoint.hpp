// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy model checkpoints in the tensor file format, and training-log
// export as comma-separated text.
//
//   model.meta          f64 [h_in, h, n_classes, n_blocks, has_adapter, rank, alpha, trainable]
//   input_proj, head    f64 matrices
//   adapter.a/.b        f64 matrices, when present
//   block<b>.layout     f64 [split, residual]
//   block<b>.<layer>    layer tensors, prefixed
//   block<b>.assignment f64 neuron-to-expert map, split blocks only

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "emoe/io.hpp"
#include "emoe/train.hpp"

namespace emoe {

namespace detail {

inline double trainable_mask(const TrainableGroups& t) {
  return double(t.input_proj) + 2 * double(t.adapter) + 4 * double(t.ffn) + 8 * double(t.gate) +
         16 * double(t.head);
}

inline TrainableGroups trainable_from_mask(std::size_t m) {
  if (m > 31) throw ValidationError("model meta: bad trainable mask");
  return {bool(m & 1), bool(m & 2), bool(m & 4), bool(m & 8), bool(m & 16)};
}

inline std::string block_prefix(std::size_t b) { return "block" + std::to_string(b) + "."; }

}  // namespace detail

inline TensorList model_tensors(const ToyModel& model) {
  model.validate();
  TensorList t;
  const bool ad = model.adapter.has_value();
  t.push_back(make_vector_tensor<double>(
      "model.meta",
      {double(model.h_in()), double(model.h()), double(model.n_classes()),
       double(model.blocks.size()), double(ad), ad ? double(model.adapter->rank()) : 0.0,
       ad ? model.adapter->alpha : 0.0, detail::trainable_mask(model.trainable)}));
  t.push_back(make_tensor("input_proj", model.input_proj));
  if (ad) {
    t.push_back(make_tensor("adapter.a", model.adapter->a));
    t.push_back(make_tensor("adapter.b", model.adapter->b));
  }
  t.push_back(make_tensor("head", model.head));
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto p = detail::block_prefix(b);
    const auto& block = model.blocks[b];
    t.push_back(make_vector_tensor<double>(p + "layout", {double(block.is_split()), double(block.residual)}));
    if (const auto* moe = std::get_if<EmoeLayer<double>>(&block.layer)) {
      append_emoe_tensors(t, *moe, p);
      const auto part = moe->partition();
      t.push_back(make_vector_tensor<double>(
          p + "assignment", std::vector<double>(part.assignment().begin(), part.assignment().end())));
    } else {
      append_ffn_tensors(t, std::get<FfnLayer<double>>(block.layer), p);
    }
  }
  return t;
}

inline ToyModel model_from_tensors(const TensorList& t) {
  const auto meta = require_tensor(t, "model.meta").values_as<double>();
  if (meta.size() != 8) throw ValidationError("model meta must hold 8 values");
  const auto h_in = detail::meta_count(meta, 0, "h_in");
  const auto h = detail::meta_count(meta, 1, "h");
  const auto n_classes = detail::meta_count(meta, 2, "n_classes");
  const auto n_blocks = detail::meta_count(meta, 3, "n_blocks");

  ToyModel m;
  const auto& proj = require_tensor(t, "input_proj");
  detail::check_dims<double>(proj, h, h_in);
  m.input_proj = proj.as_matrix<double>();
  const auto& head = require_tensor(t, "head");
  detail::check_dims<double>(head, n_classes, h);
  m.head = head.as_matrix<double>();
  if (meta[4] != 0.0) {
    const auto r = detail::meta_count(meta, 5, "rank");
    const auto& a = require_tensor(t, "adapter.a");
    const auto& b = require_tensor(t, "adapter.b");
    detail::check_dims<double>(a, r, h_in);
    detail::check_dims<double>(b, h, r);
    m.adapter = LoraAdapter{a.as_matrix<double>(), b.as_matrix<double>(), meta[6]};
  }
  m.trainable = detail::trainable_from_mask(detail::meta_count(meta, 7, "trainable"));

  for (std::size_t b = 0; b < n_blocks; ++b) {
    const auto p = detail::block_prefix(b);
    const auto layout = require_tensor(t, p + "layout").values_as<double>();
    if (layout.size() != 2) throw ValidationError(p + "layout must hold [split, residual]");
    Block block;
    block.residual = layout[1] != 0.0;
    try {
      if (layout[0] != 0.0) {
        const auto raw = require_tensor(t, p + "assignment").values_as<double>();
        std::vector<std::uint32_t> assignment;
        for (double v : raw) {
          if (!(v >= 0.0) || v != std::floor(v) || v > 4294967295.0) {
            throw ValidationError(p + "assignment holds a non-index value");
          }
          assignment.push_back(static_cast<std::uint32_t>(v));
        }
        const auto lmeta = require_tensor(t, p + "meta").values_as<double>();
        if (lmeta.size() < 4) throw ValidationError(p + "meta too short");
        Partition part(std::move(assignment), detail::meta_count(lmeta, 3, "N"));
        block.layer = emoe_from_tensors<double>(t, part, p);
      } else {
        block.layer = ffn_from_tensors<double>(t, p);
      }
    } catch (const ValidationError&) {
      throw;
    } catch (const Error& e) {
      throw ValidationError(p + ": " + e.what());
    }
    m.blocks.push_back(std::move(block));
  }
  try {
    m.validate();
  } catch (const Error& e) {
    throw ValidationError(std::string("invalid model: ") + e.what());
  }
  return m;
}

inline void save_model(const std::filesystem::path& path, const ToyModel& model) {
  write_tensors(path, model_tensors(model));
}

inline ToyModel load_model(const std::filesystem::path& path) {
  return model_from_tensors(read_tensors(path));
}

/// step,loss
inline void write_loss_csv(std::ostream& os, const TrainLog& log) {
  os << "step,loss\n";
  for (std::size_t i = 0; i < log.loss.size(); ++i) {
    os << i << ',';
    detail::csv_number(os, log.loss[i]);
    os << '\n';
  }
}

/// window,first_step,block,tokens,expert_0,...  (raw selection counts)
inline void write_usage_csv(std::ostream& os, const TrainLog& log) {
  std::size_t n = 0;
  for (const auto& w : log.usage) n = std::max(n, w.histogram.n_experts());
  os << "window,first_step,block,tokens";
  for (std::size_t i = 0; i < n; ++i) os << ",expert_" << i;
  os << '\n';
  for (const auto& w : log.usage) {
    os << w.histogram.window.value_or(0) << ',' << w.first_step << ',' << w.block << ','
       << w.histogram.tokens_seen;
    for (std::size_t i = 0; i < n; ++i) {
      os << ',' << (i < w.histogram.counts.size() ? w.histogram.counts[i] : 0);
    }
    os << '\n';
  }
}

inline std::filesystem::path usage_log_path(const std::filesystem::path& log_path) {
  auto p = log_path;
  p += ".usage.csv";
  return p;
}

/// Writes the loss curve to `path` and window histograms next to it.
inline void write_train_log(const std::filesystem::path& path, const TrainLog& log) {
  auto open = [](const std::filesystem::path& p) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open " + p.string() + " for writing");
    return f;
  };
  {
    auto f = open(path);
    write_loss_csv(f, log);
    if (!f) throw IoError("write failed: " + path.string());
  }
  auto f = open(usage_log_path(path));
  write_usage_csv(f, log);
  if (!f) throw IoError("write failed: " + usage_log_path(path).string());
}

}  // namespace emoe
