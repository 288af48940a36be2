// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Each subcommand loads its inputs, calls the
// library, and prints line-oriented results on stdout after a header of
// "# key = value" lines holding the resolved configuration.
//
// Exit codes: 0 success, 1 usage, 2 validation/format/io, 3 numeric or
// training failure.

#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "emoe/checkpoint.hpp"
#include "emoe/clustering.hpp"
#include "emoe/emoe_layer.hpp"
#include "emoe/error.hpp"
#include "emoe/ffn.hpp"
#include "emoe/io.hpp"
#include "emoe/stats.hpp"
#include "emoe/train.hpp"

namespace emoe::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kInvalid = 2, kNumeric = 3 };

enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

/// Diagnostics on the error stream, filtered by EMOE_LOG.
class Log {
 public:
  explicit Log(std::ostream& err) : err_(err) {
    if (const char* v = std::getenv("EMOE_LOG")) {
      const std::string s(v);
      if (s == "info") level_ = LogLevel::Info;
      if (s == "debug") level_ = LogLevel::Debug;
    }
  }
  void error(const std::string& m) const { err_ << "error: " << m << '\n'; }
  void info(const std::string& m) const {
    if (level_ >= LogLevel::Info) err_ << "info: " << m << '\n';
  }
  void debug(const std::string& m) const {
    if (level_ >= LogLevel::Debug) err_ << "debug: " << m << '\n';
  }

 private:
  std::ostream& err_;
  LogLevel level_ = LogLevel::Error;
};

/// INI reader that files bare keys under the active subcommand, so a config
/// file can say "steps = 100" instead of "[train-toy]\nsteps = 100".
class SubcommandConfig : public CLI::ConfigINI {
 public:
  std::string subcommand;

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto items = CLI::ConfigINI::from_config(input);
    for (auto& item : items) {
      if (item.parents.empty() && !subcommand.empty() && item.name != "++" && item.name != "--") {
        item.parents = {subcommand};
      }
    }
    return items;
  }
};

namespace detail {

template <typename T>
void print_values(std::ostream& out, std::span<const T> v, char sep = ' ') {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out << sep;
    out << v[i];
  }
}

inline std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? sep : "") + parts[i];
  return s;
}

inline void print_header(std::ostream& out, const CLI::App& sub) {
  out << "# emoe " << sub.get_name() << '\n';
  for (const auto* opt : sub.get_options()) {
    if (opt->get_name() == "--help") continue;
    const auto& lnames = opt->get_lnames();
    const std::string name = lnames.empty() ? opt->get_name() : lnames.front();
    std::string value;
    if (opt->count() > 0) {
      value = join(opt->results(), ",");
    } else if (!opt->get_default_str().empty()) {
      value = opt->get_default_str();
    } else {
      value = "(unset)";
    }
    out << "# " << name << " = " << value << '\n';
  }
}

inline DType layer_dtype(const TensorList& tensors) {
  const auto* t = find_tensor(tensors, "G");
  if (!t) t = find_tensor(tensors, "K");
  if (!t) throw ValidationError("layer file holds neither K nor G");
  return t->dtype();
}

template <Real T>
Matrix<T> read_inputs(const std::filesystem::path& path, std::size_t h) {
  const auto tensors = read_tensors(path);
  if (tensors.empty()) throw ValidationError(path.string() + ": no tensors");
  const Tensor* t = find_tensor(tensors, "inputs");
  if (!t) t = find_tensor(tensors, "x");
  if (!t) t = &tensors.front();
  auto m = t->as_matrix<T>();
  if (m.cols() != h) {
    throw ShapeError(path.string() + ": inputs have width " + std::to_string(m.cols()) +
                     ", layer expects h=" + std::to_string(h));
  }
  return m;
}

inline SelectionPolicy resolve_policy(const std::string& name, const std::optional<std::uint64_t>& seed) {
  if (name == "random" && !seed) throw CLI::ValidationError("--policy random needs --seed");
  return parse_policy(name, seed.value_or(0));
}

inline std::vector<std::size_t> parse_index_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw ArgumentError("empty entry in index list '" + s + "'");
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &pos);
    } catch (const std::exception&) {
      throw ArgumentError("'" + item + "' is not an index");
    }
    if (pos != item.size() || item[0] == '-') throw ArgumentError("'" + item + "' is not an index");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ArgumentError("empty index list");
  return out;
}

template <Real T>
int set_precision(std::ostream& out) {
  out << std::setprecision(std::is_same_v<T, float> ? 9 : 17);
  return 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommand state

struct ClusterArgs {
  std::string ffn, out;
  std::size_t experts = 0;
  std::optional<std::uint64_t> seed;
  std::size_t max_iter = 100, restarts = 3;
};

struct SplitArgs {
  std::string ffn, partition, out, gate = "avgk";
  std::size_t topk = 1;
};

struct MergeArgs {
  std::string emoe, out;
};

struct ForwardArgs {
  std::string layer, input, policy = "top";
  std::size_t topk = 0;
  std::optional<std::uint64_t> seed;
};

struct StatsArgs {
  std::string emoe, inputs, policy = "top", heatmap_out, task = "inputs";
  std::size_t topk = 0;
  std::optional<std::uint64_t> seed;
};

struct PruneArgs {
  std::string emoe, keep, out;
};

struct FlopsArgs {
  std::uint64_t h = 0, d = 0, experts = 0, topk = 0;
};

struct TrainArgs {
  std::string mode = "emoe", out, log, init, partition_method = "cluster", activation = "relu",
              optimizer = "adam", policy = "top";
  std::vector<std::string> freeze;
  std::optional<std::uint64_t> seed, label_seed;
  std::size_t clusters = 8, h_in = 16, classes = 4, samples_per_cluster = 50;
  double noise = 0.5;
  std::size_t h = 16, d = 64, blocks = 1;
  bool residual = true;
  std::size_t experts = 8, topk = 2, adapter_rank = 0;
  double adapter_alpha = 8.0;
  std::size_t steps = 500, batch = 32, log_window = 50;
  double lr = 1e-2;
};

struct ConvertArgs {
  std::string model, direction, out, gate = "avgk";
  std::vector<std::string> partition;
  std::size_t topk = 0;
};

// ---------------------------------------------------------------------------
// Handlers

inline int do_cluster(const ClusterArgs& a, std::ostream& out, const Log& log, bool csv) {
  const auto tensors = read_tensors(a.ffn);
  if (detect_layer_kind(tensors) != LayerKind::Dense) throw ValidationError(a.ffn + ": not a dense layer");
  const auto layer = ffn_from_tensors<double>(tensors);
  log.info("clustering " + std::to_string(layer.d()) + " keys of width " + std::to_string(layer.h()));
  const auto r = cluster_keys(layer, a.experts, *a.seed,
                              ClusteringOptions{.max_iter = a.max_iter, .restarts = a.restarts});
  write_partition(a.out, r.partition);
  out << std::setprecision(17);
  const auto& obj = r.report.objective_per_iteration;
  if (csv) {
    out << "iteration,objective\n";
    for (std::size_t i = 0; i < obj.size(); ++i) out << i << ',' << obj[i] << '\n';
  } else {
    out << "objective " << obj.back() << '\n'
        << "iterations " << r.report.iterations << '\n'
        << "converged " << (r.report.converged ? "yes" : "no") << '\n'
        << "restart " << r.report.restart << '\n';
  }
  for (std::size_t i = 0; i < obj.size(); ++i) log.debug("iteration " + std::to_string(i) + " objective " + std::to_string(obj[i]));
  out << "wrote " << a.out << '\n';
  return kOk;
}

template <Real T>
int split_typed(const SplitArgs& a, const TensorList& tensors, std::ostream& out) {
  const auto layer = ffn_from_tensors<T>(tensors);
  const auto part = read_partition(a.partition);
  const auto mode = a.gate == "learned" ? GateMode::Learned : GateMode::AvgK;
  const auto moe = split(layer, part, a.topk, mode);
  write_emoe(a.out, moe);
  out << "experts " << moe.n_experts() << '\n'
      << "expert_size " << moe.expert_size() << '\n'
      << "topk " << moe.top_k() << '\n'
      << "gate " << to_string(moe.gate_mode()) << '\n'
      << "wrote " << a.out << '\n';
  return kOk;
}

inline int do_split(const SplitArgs& a, std::ostream& out) {
  const auto tensors = read_tensors(a.ffn);
  if (detect_layer_kind(tensors) != LayerKind::Dense) throw ValidationError(a.ffn + ": not a dense layer");
  return detail::layer_dtype(tensors) == DType::F32 ? split_typed<float>(a, tensors, out)
                                                    : split_typed<double>(a, tensors, out);
}

template <Real T>
int merge_typed(const MergeArgs& a, std::ostream& out) {
  const auto layer = merge(read_emoe<T>(a.emoe));
  write_ffn(a.out, layer);
  out << "neurons " << layer.d() << '\n' << "wrote " << a.out << '\n';
  return kOk;
}

inline int do_merge(const MergeArgs& a, std::ostream& out) {
  const auto tensors = read_tensors(a.emoe);
  return detail::layer_dtype(tensors) == DType::F32 ? merge_typed<float>(a, out)
                                                    : merge_typed<double>(a, out);
}

template <Real T>
int forward_typed(const ForwardArgs& a, const TensorList& tensors, std::ostream& out, bool csv) {
  detail::set_precision<T>(out);
  const bool split_layer = detect_layer_kind(tensors) == LayerKind::Split;
  if (!split_layer) {
    const auto layer = ffn_from_tensors<T>(tensors);
    const auto x = detail::read_inputs<T>(a.input, layer.h());
    if (csv) {
      out << "row,selected";
      for (std::size_t c = 0; c < layer.h(); ++c) out << ",y_" << c;
      out << '\n';
    }
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const auto y = ffn_forward<T>(layer, x.row(r));
      if (csv) {
        out << r << ",all,";
        detail::print_values<T>(out, y, ',');
      } else {
        out << "output ";
        detail::print_values<T>(out, y);
      }
      out << '\n';
    }
    return kOk;
  }
  const auto layer = emoe_from_tensors<T>(tensors, read_partition(partition_sidecar(a.layer)));
  const auto x = detail::read_inputs<T>(a.input, layer.h());
  const auto policy = detail::resolve_policy(a.policy, a.seed);
  if (csv) {
    out << "row,selected";
    for (std::size_t c = 0; c < layer.h(); ++c) out << ",y_" << c;
    out << '\n';
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto p = policy;
    if (p.kind == SelectionPolicy::Kind::RandomK) p.seed = derive_seed(policy.seed, r);
    const auto o = emoe_forward<T>(layer, x.row(r), p, a.topk);
    if (csv) {
      out << r << ',';
      detail::print_values<std::size_t>(out, o.selected, ';');
      out << ',';
      detail::print_values<T>(out, o.y, ',');
      out << '\n';
    } else {
      out << "output ";
      detail::print_values<T>(out, o.y);
      out << "\nselected ";
      detail::print_values<std::size_t>(out, o.selected);
      out << '\n';
    }
  }
  return kOk;
}

inline int do_forward(const ForwardArgs& a, std::ostream& out, bool csv) {
  const auto tensors = read_tensors(a.layer);
  return detail::layer_dtype(tensors) == DType::F32 ? forward_typed<float>(a, tensors, out, csv)
                                                    : forward_typed<double>(a, tensors, out, csv);
}

template <Real T>
int stats_typed(const StatsArgs& a, std::ostream& out, const Log& log, bool csv) {
  const auto layer = read_emoe<T>(a.emoe);
  const auto x = detail::read_inputs<T>(a.inputs, layer.h());
  const auto policy = detail::resolve_policy(a.policy, a.seed);
  const auto hist = usage_histogram(layer, x, policy, a.topk);

  double plain = 0.0, weighted = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto p = policy;
    if (p.kind == SelectionPolicy::Kind::RandomK) p.seed = derive_seed(policy.seed, r);
    const auto sel = select_experts<T>(gate_scores<T>(layer, x.row(r)), p, a.topk == 0 ? layer.top_k() : a.topk);
    const auto ratios = activation_ratios<T>(layer, x.row(r), sel);
    if (ratios.activated_total == 0) continue;
    plain += ratios.plain;
    weighted += ratios.weighted;
    ++counted;
  }
  log.info(std::to_string(counted) + " of " + std::to_string(x.rows()) + " inputs activate at least one neuron");
  if (counted) {
    plain /= double(counted);
    weighted /= double(counted);
  }
  const auto freq = hist.frequencies();
  out << std::setprecision(17);
  if (csv) {
    out << "expert,count,frequency\n";
    for (std::size_t i = 0; i < hist.counts.size(); ++i) {
      out << i << ',' << hist.counts[i] << ',' << freq[i] << '\n';
    }
  } else {
    out << "tokens " << hist.tokens_seen << '\n' << "k " << hist.k << "\ncounts ";
    detail::print_values<std::uint64_t>(out, hist.counts);
    out << "\nfrequencies ";
    detail::print_values<double>(out, freq);
    out << "\nratio_tokens " << counted << '\n'
        << "plain_ratio " << plain << '\n'
        << "weighted_ratio " << weighted << '\n';
  }
  if (!a.heatmap_out.empty()) {
    write_heatmap_csv(a.heatmap_out, export_heatmap({{a.task, hist}}));
    out << "wrote " << a.heatmap_out << '\n';
  }
  return kOk;
}

inline int do_stats(const StatsArgs& a, std::ostream& out, const Log& log, bool csv) {
  const auto tensors = read_tensors(a.emoe);
  if (detect_layer_kind(tensors) != LayerKind::Split) throw ValidationError(a.emoe + ": not a split layer");
  return detail::layer_dtype(tensors) == DType::F32 ? stats_typed<float>(a, out, log, csv)
                                                    : stats_typed<double>(a, out, log, csv);
}

template <Real T>
int prune_typed(const PruneArgs& a, std::ostream& out) {
  const auto layer = read_emoe<T>(a.emoe);
  const auto pruned = prune(layer, detail::parse_index_list(a.keep));
  const auto path = a.out.empty() ? a.emoe : a.out;
  write_emoe(path, pruned);
  out << "experts " << pruned.n_experts() << '\n'
      << "neurons " << pruned.d() << '\n'
      << "topk " << pruned.top_k() << '\n'
      << "wrote " << path << '\n';
  return kOk;
}

inline int do_prune(const PruneArgs& a, std::ostream& out) {
  const auto tensors = read_tensors(a.emoe);
  return detail::layer_dtype(tensors) == DType::F32 ? prune_typed<float>(a, out)
                                                    : prune_typed<double>(a, out);
}

inline int do_flops(const FlopsArgs& a, std::ostream& out, bool csv) {
  const auto r = flops_report(a.h, a.d, a.experts, a.topk);
  out << std::setprecision(17);
  if (csv) {
    out << "h,d,experts,topk,dense_macs,gate_macs,sparse_macs,ratio\n"
        << a.h << ',' << a.d << ',' << a.experts << ',' << a.topk << ',' << r.dense_macs << ','
        << r.gate_macs << ',' << r.sparse_macs << ',' << r.ratio << '\n';
  } else {
    out << "dense_macs " << r.dense_macs << '\n'
        << "gate_macs " << r.gate_macs << '\n'
        << "sparse_macs " << r.sparse_macs << '\n'
        << "ratio " << r.ratio << '\n';
  }
  return kOk;
}

inline TrainableGroups freeze_groups(const std::vector<std::string>& names) {
  TrainableGroups t;
  for (const auto& n : names) {
    if (n == "input_proj") t.input_proj = false;
    else if (n == "adapter") t.adapter = false;
    else if (n == "ffn") t.ffn = false;
    else if (n == "gate") t.gate = false;
    else if (n == "head") t.head = false;
    else throw ArgumentError("unknown parameter group '" + n + "'");
  }
  return t;
}

inline int do_train(const TrainArgs& a, std::ostream& out, const Log& log) {
  const std::uint64_t seed = *a.seed;
  const auto dataset = make_toy_dataset({.n_clusters = a.clusters,
                                         .h_in = a.h_in,
                                         .n_classes = a.classes,
                                         .noise_sigma = a.noise,
                                         .samples_per_cluster = a.samples_per_cluster,
                                         .seed = seed,
                                         .label_seed = a.label_seed});
  ToyModel model;
  if (!a.init.empty()) {
    model = load_model(a.init);
    log.info("loaded " + a.init);
  } else {
    model = make_toy_model({.h_in = a.h_in,
                            .h = a.h,
                            .d = a.d,
                            .n_classes = a.classes,
                            .n_blocks = a.blocks,
                            .activation = a.activation == "gelu" ? ActivationKind::GeluTanh : ActivationKind::ReLU,
                            .residual = a.residual,
                            .seed = derive_seed(seed, 1)});
  }

  bool any_split = false, any_dense = false;
  for (const auto& b : model.blocks) (b.is_split() ? any_split : any_dense) = true;
  if (a.mode == "dense") {
    if (any_split) throw StateError("--mode dense needs dense blocks; convert the model first");
  } else if (any_dense) {
    if (any_split) throw StateError("model mixes dense and split blocks");
    const auto parts = a.partition_method == "random" ? random_blocks(model, a.experts, derive_seed(seed, 2))
                                                      : cluster_blocks(model, a.experts, derive_seed(seed, 2));
    model = convert_lora2emoe(model, parts, a.topk,
                              a.mode == "emoe-learn" ? GateMode::Learned : GateMode::AvgK);
    log.info("split every block into " + std::to_string(a.experts) + " experts");
  }
  if (a.adapter_rank > 0) add_adapter(model, a.adapter_rank, a.adapter_alpha, derive_seed(seed, 3));
  model.trainable = freeze_groups(a.freeze);

  const TrainConfig cfg{.steps = a.steps,
                        .batch_size = a.batch,
                        .learning_rate = a.lr,
                        .optimizer = a.optimizer == "sgd" ? OptimizerKind::Sgd : OptimizerKind::Adam,
                        .seed = derive_seed(seed, 4),
                        .policy = parse_policy(a.policy, derive_seed(seed, 5)),
                        .k = a.mode == "dense" ? 0 : a.topk,
                        .log_window = a.log_window};
  const auto result = train(std::move(model), dataset, cfg);
  save_model(a.out, result.model);
  write_train_log(a.log, result.log);
  out << std::setprecision(17)
      << "final_loss " << (result.log.loss.empty() ? 0.0 : result.log.loss.back()) << '\n'
      << "train_accuracy " << result.log.train_accuracy << '\n'
      << "test_accuracy " << result.log.test_accuracy << '\n'
      << "wrote " << a.out << '\n'
      << "wrote " << a.log << '\n'
      << "wrote " << usage_log_path(a.log).string() << '\n';
  return kOk;
}

inline int do_convert(const ConvertArgs& a, std::ostream& out) {
  const auto model = load_model(a.model);
  ToyModel converted;
  if (a.direction == "emoe2lora") {
    converted = convert_emoe2lora(model);
  } else {
    if (a.partition.empty()) throw CLI::ValidationError("--direction lora2emoe needs --partition");
    std::vector<Partition> parts;
    for (const auto& p : a.partition) parts.push_back(read_partition(p));
    if (parts.size() == 1) parts.resize(model.blocks.size(), parts.front());
    const std::size_t n = parts.front().n_experts();
    const std::size_t k = a.topk == 0 ? std::max<std::size_t>(1, n / 4) : a.topk;
    converted = convert_lora2emoe(model, parts, k, a.gate == "learned" ? GateMode::Learned : GateMode::AvgK);
  }
  const auto path = a.out.empty() ? a.model : a.out;
  save_model(path, converted);
  out << "direction " << a.direction << '\n'
      << "blocks " << converted.blocks.size() << '\n'
      << "wrote " << path << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const Log log(err);
  CLI::App app{"Turn dense FFN layers into sparse mixtures of experts and study them.", "emoe"};
  app.set_help_flag("--help", "Print this help and exit");
  app.require_subcommand(1);
  app.allow_config_extras(false);
  app.option_defaults()->always_capture_default();
  auto config = std::make_shared<SubcommandConfig>();
  for (int i = 1; i < argc; ++i) {
    if (argv[i][0] != '-') {
      config->subcommand = argv[i];
      break;
    }
  }
  app.config_formatter(config);
  app.set_config("--config", "", "Read options from a key = value file; flags override it");

  std::string format = "text";
  app.add_option("--format", format, "Output format")->check(CLI::IsMember({"text", "csv"}));

  const auto policies = CLI::IsMember({"top", "bottom", "nottop", "random", "all"});

  ClusterArgs ca;
  auto* cluster = app.add_subcommand("cluster", "Partition a dense layer's keys into balanced experts");
  cluster->add_option("--ffn", ca.ffn, "Dense layer file")->required();
  cluster->add_option("--experts", ca.experts, "Number of experts N")->required();
  cluster->add_option("--seed", ca.seed, "Random seed")->required();
  cluster->add_option("--out", ca.out, "Partition file to write")->required();
  cluster->add_option("--max-iter", ca.max_iter, "Iteration cap per restart");
  cluster->add_option("--restarts", ca.restarts, "Number of seeded restarts");

  SplitArgs sa;
  auto* splitc = app.add_subcommand("split", "Split a dense layer into experts");
  splitc->add_option("--ffn", sa.ffn, "Dense layer file")->required();
  splitc->add_option("--partition", sa.partition, "Partition file")->required();
  splitc->add_option("--topk", sa.topk, "Experts used per input")->required();
  splitc->add_option("--out", sa.out, "Split layer file to write")->required();
  splitc->add_option("--gate", sa.gate, "Gate mode")->check(CLI::IsMember({"avgk", "learned"}));

  MergeArgs ma;
  auto* mergec = app.add_subcommand("merge", "Merge a split layer back into a dense layer");
  mergec->add_option("--emoe", ma.emoe, "Split layer file")->required();
  mergec->add_option("--out", ma.out, "Dense layer file to write")->required();

  ForwardArgs fa;
  auto* forward = app.add_subcommand("forward", "Run a dense or split layer on inputs");
  forward->add_option("--layer", fa.layer, "Layer file")->required();
  forward->add_option("--input", fa.input, "Tensor file with one input per row")->required();
  forward->add_option("--policy", fa.policy, "Expert selection")->check(policies);
  forward->add_option("--topk", fa.topk, "Experts per input; 0 uses the stored value");
  forward->add_option("--seed", fa.seed, "Seed for --policy random");

  StatsArgs sta;
  auto* stats = app.add_subcommand("stats", "Expert usage and activation ratios over inputs");
  stats->add_option("--emoe", sta.emoe, "Split layer file")->required();
  stats->add_option("--inputs", sta.inputs, "Tensor file with one input per row")->required();
  stats->add_option("--policy", sta.policy, "Expert selection")->check(policies);
  stats->add_option("--topk", sta.topk, "Experts per input; 0 uses the stored value");
  stats->add_option("--seed", sta.seed, "Seed for --policy random");
  stats->add_option("--heatmap-out", sta.heatmap_out, "Write a usage heatmap CSV here");
  stats->add_option("--task", sta.task, "Row label in the heatmap");

  PruneArgs pa;
  auto* prunec = app.add_subcommand("prune", "Keep only the listed experts");
  prunec->add_option("--emoe", pa.emoe, "Split layer file")->required();
  prunec->add_option("--keep", pa.keep, "Comma-separated expert indices")->required();
  prunec->add_option("--out", pa.out, "Output file (default: rewrite --emoe)");

  FlopsArgs fla;
  auto* flops = app.add_subcommand("flops", "Per-token multiply-accumulate counts");
  flops->add_option("--h", fla.h, "Hidden width")->required();
  flops->add_option("--d", fla.d, "FFN width")->required();
  flops->add_option("--experts", fla.experts, "Number of experts N")->required();
  flops->add_option("--topk", fla.topk, "Experts used per token")->required();

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train-toy", "Train the toy classifier");
  trainc->add_option("--mode", ta.mode, "Block type")->check(CLI::IsMember({"dense", "emoe", "emoe-learn"}));
  trainc->add_option("--out", ta.out, "Model checkpoint to write")->required();
  trainc->add_option("--log", ta.log, "Loss CSV to write (usage goes to <log>.usage.csv)")->required();
  trainc->add_option("--seed", ta.seed, "Random seed")->required();
  trainc->add_option("--init", ta.init, "Start from this checkpoint");
  trainc->add_option("--clusters", ta.clusters, "Latent clusters in the toy task");
  trainc->add_option("--h-in", ta.h_in, "Input width");
  trainc->add_option("--classes", ta.classes, "Number of classes");
  trainc->add_option("--noise", ta.noise, "Per-coordinate noise sigma");
  trainc->add_option("--samples-per-cluster", ta.samples_per_cluster, "Samples drawn per cluster");
  trainc->add_option("--label-seed", ta.label_seed, "Seed of the cluster-to-label rule");
  trainc->add_option("--h", ta.h, "Hidden width");
  trainc->add_option("--d", ta.d, "FFN width");
  trainc->add_option("--blocks", ta.blocks, "Number of FFN blocks");
  trainc->add_option("--activation", ta.activation, "FFN activation")->check(CLI::IsMember({"relu", "gelu"}));
  trainc->add_option("--residual", ta.residual, "Residual connection around blocks");
  trainc->add_option("--experts", ta.experts, "Experts per block");
  trainc->add_option("--topk", ta.topk, "Experts used per input");
  trainc->add_option("--partition-method", ta.partition_method, "How dense blocks are split")
      ->check(CLI::IsMember({"cluster", "random"}));
  trainc->add_option("--adapter-rank", ta.adapter_rank, "Attach an adapter of this rank (0: none)");
  trainc->add_option("--adapter-alpha", ta.adapter_alpha, "Adapter scale numerator");
  trainc->add_option("--freeze", ta.freeze, "Groups to freeze: input_proj, adapter, ffn, gate, head")
      ->delimiter(',');
  trainc->add_option("--steps", ta.steps, "Optimizer steps");
  trainc->add_option("--batch", ta.batch, "Batch size");
  trainc->add_option("--lr", ta.lr, "Learning rate");
  trainc->add_option("--optimizer", ta.optimizer, "Optimizer")->check(CLI::IsMember({"adam", "sgd"}));
  trainc->add_option("--policy", ta.policy, "Expert selection while training")->check(policies);
  trainc->add_option("--log-window", ta.log_window, "Steps per usage histogram window");

  ConvertArgs cva;
  auto* convert = app.add_subcommand("convert", "Split or merge every block of a toy model");
  convert->add_option("--model", cva.model, "Model checkpoint")->required();
  convert->add_option("--direction", cva.direction, "Conversion")->required()
      ->check(CLI::IsMember({"lora2emoe", "emoe2lora"}));
  convert->add_option("--partition", cva.partition, "Partition file, one per block or one for all")
      ;
  convert->add_option("--topk", cva.topk, "Experts per input (default N/4, at least 1)");
  convert->add_option("--gate", cva.gate, "Gate mode")->check(CLI::IsMember({"avgk", "learned"}));
  convert->add_option("--out", cva.out, "Output file (default: rewrite --model)");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  const bool csv = format == "csv";
  CLI::App* sub = app.get_subcommands().front();
  try {
    detail::print_header(out, *sub);
    if (sub == cluster) return do_cluster(ca, out, log, csv);
    if (sub == splitc) return do_split(sa, out);
    if (sub == mergec) return do_merge(ma, out);
    if (sub == forward) return do_forward(fa, out, csv);
    if (sub == stats) return do_stats(sta, out, log, csv);
    if (sub == prunec) return do_prune(pa, out);
    if (sub == flops) return do_flops(fla, out, csv);
    if (sub == trainc) return do_train(ta, out, log);
    if (sub == convert) return do_convert(cva, out);
  } catch (const CLI::ValidationError& e) {
    err << "usage error: " << e.what() << '\n' << sub->help();
    return kUsage;
  } catch (const ArgumentError& e) {
    log.error(e.what());
    return kUsage;
  } catch (const TrainingError& e) {
    log.error(e.what());
    return kNumeric;
  } catch (const Error& e) {
    log.error(e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    log.error(e.what());
    return kNumeric;
  }
  return kUsage;
}

}  // namespace emoe::cli
