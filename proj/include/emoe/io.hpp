// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary containers for tensors and partitions, layer files built on top of
// them, and comma-separated exports.
//
// Tensor file (all integers little-endian):
//   "EMOE" | u32 version=1 | u32 count | count x entry
//   entry: u16 name_len | name bytes (utf-8) | u8 dtype (0=f32, 1=f64)
//          | u8 ndim (1 or 2) | ndim x u32 dims | row-major payload
//
// Partition file:
//   "EMOP" | u32 version=1 | u32 d | u32 n_experts | d x u32 expert id

#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
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

inline constexpr std::uint32_t kFormatVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct Tensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::variant<std::vector<float>, std::vector<double>> data;

  DType dtype() const noexcept {
    return std::holds_alternative<std::vector<float>>(data) ? DType::F32 : DType::F64;
  }

  std::size_t element_count() const noexcept {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  std::size_t rows() const noexcept { return dims.size() == 2 ? dims[0] : 1; }
  std::size_t cols() const noexcept { return dims.empty() ? 0 : dims.back(); }

  /// Values converted to T.
  template <Real T>
  std::vector<T> values_as() const {
    return std::visit(
        [](const auto& v) { return std::vector<T>(v.begin(), v.end()); }, data);
  }

  /// 2-D tensors map directly; a 1-D tensor becomes a single row.
  template <Real T>
  Matrix<T> as_matrix() const {
    return Matrix<T>(rows(), cols(), values_as<T>());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.name != b.name || a.dims != b.dims || a.dtype() != b.dtype()) return false;
    return std::visit(
        [&](const auto& av) {
          using V = std::decay_t<decltype(av)>;
          const auto& bv = std::get<V>(b.data);
          using E = typename V::value_type;
          return bitwise_equal<E>(av, bv);
        },
        a.data);
  }
};

using TensorList = std::vector<Tensor>;

template <Real T>
Tensor make_tensor(std::string name, const Matrix<T>& m) {
  return {std::move(name),
          {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
          std::vector<T>(m.values().begin(), m.values().end())};
}

template <Real T>
Tensor make_vector_tensor(std::string name, std::vector<T> values) {
  const auto n = static_cast<std::uint32_t>(values.size());
  return {std::move(name), {n}, std::move(values)};
}

inline const Tensor* find_tensor(const TensorList& tensors, std::string_view name) {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

inline const Tensor& require_tensor(const TensorList& tensors, std::string_view name) {
  if (const auto* t = find_tensor(tensors, name)) return *t;
  throw ValidationError("missing tensor '" + std::string(name) + "'");
}

namespace detail {

class ByteWriter {
 public:
  void bytes(std::string_view s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v), 4); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  std::string take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> in) : in_(in) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }

  std::string_view bytes(std::size_t n, std::string_view what) {
    need(n, what);
    std::string_view s(in_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(std::string_view what) { return static_cast<std::uint8_t>(le(1, what)); }
  std::uint16_t u16(std::string_view what) { return static_cast<std::uint16_t>(le(2, what)); }
  std::uint32_t u32(std::string_view what) { return static_cast<std::uint32_t>(le(4, what)); }
  float f32(std::string_view what) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(le(4, what)));
  }
  double f64(std::string_view what) { return std::bit_cast<double>(le(8, what)); }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw FormatError("truncated " + std::string(what) + " at offset " +
                        std::to_string(pos_) + ": need " + std::to_string(n) + " bytes, have " +
                        std::to_string(remaining()));
    }
  }

 private:
  std::uint64_t le(int n, std::string_view what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const char> in_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return std::move(buf).str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

inline void check_magic(ByteReader& r, std::string_view magic) {
  const auto got = r.bytes(magic.size(), "magic");
  if (got != magic) {
    throw FormatError("bad magic at offset 0: expected '" + std::string(magic) + "'");
  }
  const auto at = r.offset();
  const auto version = r.u32("version");
  if (version != kFormatVersion) {
    throw FormatError("unsupported version " + std::to_string(version) + " at offset " +
                      std::to_string(at));
  }
}

}  // namespace detail

inline std::string encode_tensors(const TensorList& tensors) {
  std::set<std::string_view> names;
  detail::ByteWriter w;
  w.bytes("EMOE");
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.empty() || t.name.size() > 0xFFFF) {
      throw ArgumentError("tensor name must be 1..65535 bytes");
    }
    if (!names.insert(t.name).second) throw ArgumentError("duplicate tensor name '" + t.name + "'");
    if (t.dims.empty() || t.dims.size() > 2) {
      throw ArgumentError("tensor '" + t.name + "' must be 1-D or 2-D");
    }
    const std::size_t n = std::visit([](const auto& v) { return v.size(); }, t.data);
    if (n != t.element_count()) {
      throw ShapeError("tensor '" + t.name + "' payload does not match its dims");
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype()));
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    if (const auto* f = std::get_if<std::vector<float>>(&t.data)) {
      for (float v : *f) w.f32(v);
    } else {
      for (double v : std::get<std::vector<double>>(t.data)) w.f64(v);
    }
  }
  return w.take();
}

inline TensorList decode_tensors(std::span<const char> bytes) {
  detail::ByteReader r(bytes);
  detail::check_magic(r, "EMOE");
  const auto count = r.u32("entry count");
  TensorList out;
  std::set<std::string> names;
  for (std::uint32_t e = 0; e < count; ++e) {
    Tensor t;
    const auto name_len = r.u16("name length");
    t.name = std::string(r.bytes(name_len, "name"));
    if (!names.insert(t.name).second) {
      throw FormatError("duplicate tensor name '" + t.name + "' at offset " +
                        std::to_string(r.offset()));
    }
    const auto dtype_at = r.offset();
    const auto dtype = r.u8("dtype");
    if (dtype > 1) {
      throw FormatError("unknown dtype " + std::to_string(dtype) + " at offset " +
                        std::to_string(dtype_at));
    }
    const auto ndim_at = r.offset();
    const auto ndim = r.u8("ndim");
    if (ndim < 1 || ndim > 2) {
      throw FormatError("unsupported ndim " + std::to_string(ndim) + " at offset " +
                        std::to_string(ndim_at));
    }
    for (int i = 0; i < ndim; ++i) t.dims.push_back(r.u32("dims"));
    const std::size_t n = t.element_count();
    const std::size_t payload_at = r.offset();
    const std::size_t elem = dtype == 0 ? 4 : 8;
    if (t.dims.size() == 2 && t.dims[0] != 0 && n / t.dims[0] != t.dims[1]) {
      throw FormatError("tensor '" + t.name + "' dims overflow");
    }
    r.need(n * elem, "payload of '" + t.name + "'");
    auto non_finite = [&](std::size_t i) {
      return ValidationError("non-finite value in tensor '" + t.name + "' at offset " +
                             std::to_string(payload_at + i * elem));
    };
    if (dtype == 0) {
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = r.f32("payload");
        if (!std::isfinite(v[i])) throw non_finite(i);
      }
      t.data = std::move(v);
    } else {
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = r.f64("payload");
        if (!std::isfinite(v[i])) throw non_finite(i);
      }
      t.data = std::move(v);
    }
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes at offset " + std::to_string(r.offset()));
  }
  return out;
}

inline void write_tensors(const std::filesystem::path& path, const TensorList& tensors) {
  detail::write_file(path, encode_tensors(tensors));
}

inline TensorList read_tensors(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  try {
    return decode_tensors(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Partitions

inline std::string encode_partition(const Partition& p) {
  detail::ByteWriter w;
  w.bytes("EMOP");
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(p.d()));
  w.u32(static_cast<std::uint32_t>(p.n_experts()));
  for (auto id : p.assignment()) w.u32(id);
  return w.take();
}

inline Partition decode_partition(std::span<const char> bytes) {
  detail::ByteReader r(bytes);
  detail::check_magic(r, "EMOP");
  const auto d = r.u32("d");
  const auto n = r.u32("n_experts");
  r.need(static_cast<std::size_t>(d) * 4, "assignment");
  std::vector<std::uint32_t> assignment(d);
  for (auto& a : assignment) a = r.u32("assignment");
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes at offset " + std::to_string(r.offset()));
  }
  try {
    return Partition(std::move(assignment), n);
  } catch (const Error& e) {
    throw ValidationError(std::string("invalid partition: ") + e.what());
  }
}

inline void write_partition(const std::filesystem::path& path, const Partition& p) {
  detail::write_file(path, encode_partition(p));
}

inline Partition read_partition(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  try {
    return decode_partition(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Layers
//
// Dense layer: "meta" = [h, d, activation], "K", "V", optional "b_k", "b_v".
// Split layer: "meta" = [h, d, activation, N, top_k, gate_mode], "G",
//   "K_i"/"V_i" per expert, optional "b_k_i", "b_v", "b_g"; plus a partition
//   side-car at <path>.partition giving each neuron's expert.
// Names can carry a prefix so several layers can share a file.

enum class LayerKind { Dense, Split };

namespace detail {

inline std::size_t meta_count(const std::vector<double>& meta, std::size_t i,
                              std::string_view what) {
  const double v = meta.at(i);
  if (v < 0 || v != std::floor(v) || v > 1e12) {
    throw ValidationError("meta field " + std::string(what) + " is not a count");
  }
  return static_cast<std::size_t>(v);
}

template <Real T>
void check_dims(const Tensor& t, std::size_t rows, std::size_t cols) {
  if (t.dims.size() != 2 || t.dims[0] != rows || t.dims[1] != cols) {
    throw ValidationError("tensor '" + t.name + "' has wrong shape, expected " +
                          std::to_string(rows) + "x" + std::to_string(cols));
  }
}

template <Real T>
std::vector<T> optional_vector(const TensorList& tensors, const std::string& name,
                               std::size_t len) {
  const auto* t = find_tensor(tensors, name);
  if (!t) return {};
  if (t->dims.size() != 1 || t->dims[0] != len) {
    throw ValidationError("tensor '" + name + "' must be 1-D of length " + std::to_string(len));
  }
  return t->values_as<T>();
}

}  // namespace detail

inline LayerKind detect_layer_kind(const TensorList& tensors, const std::string& prefix = "") {
  return find_tensor(tensors, prefix + "G") ? LayerKind::Split : LayerKind::Dense;
}

template <Real T>
void append_ffn_tensors(TensorList& out, const FfnLayer<T>& layer, const std::string& prefix = "") {
  out.push_back(make_vector_tensor<double>(
      prefix + "meta", {double(layer.h()), double(layer.d()), double(layer.activation())}));
  out.push_back(make_tensor(prefix + "K", layer.keys()));
  out.push_back(make_tensor(prefix + "V", layer.values()));
  if (!layer.key_bias().empty()) {
    out.push_back(make_vector_tensor<T>(prefix + "b_k", {layer.key_bias().begin(), layer.key_bias().end()}));
  }
  if (!layer.value_bias().empty()) {
    out.push_back(
        make_vector_tensor<T>(prefix + "b_v", {layer.value_bias().begin(), layer.value_bias().end()}));
  }
}

template <Real T>
FfnLayer<T> ffn_from_tensors(const TensorList& tensors, const std::string& prefix = "") {
  const auto meta = require_tensor(tensors, prefix + "meta").values_as<double>();
  if (meta.size() < 3) throw ValidationError("dense layer meta needs [h, d, activation]");
  const auto h = detail::meta_count(meta, 0, "h");
  const auto d = detail::meta_count(meta, 1, "d");
  const auto act = activation_from_code(meta[2]);
  const auto& K = require_tensor(tensors, prefix + "K");
  const auto& V = require_tensor(tensors, prefix + "V");
  detail::check_dims<T>(K, h, d);
  detail::check_dims<T>(V, d, h);
  return FfnLayer<T>(K.as_matrix<T>(), V.as_matrix<T>(), act,
                     detail::optional_vector<T>(tensors, prefix + "b_k", d),
                     detail::optional_vector<T>(tensors, prefix + "b_v", h));
}

template <Real T>
void append_emoe_tensors(TensorList& out, const EmoeLayer<T>& layer,
                         const std::string& prefix = "") {
  out.push_back(make_vector_tensor<double>(
      prefix + "meta", {double(layer.h()), double(layer.d()), double(layer.activation()),
                        double(layer.n_experts()), double(layer.top_k()),
                        double(layer.gate_mode())}));
  out.push_back(make_tensor(prefix + "G", layer.gate()));
  for (std::size_t i = 0; i < layer.n_experts(); ++i) {
    const auto& e = layer.expert(i);
    const auto s = std::to_string(i);
    out.push_back(make_tensor(prefix + "K_" + s, e.keys));
    out.push_back(make_tensor(prefix + "V_" + s, e.values));
    if (!e.key_bias.empty()) out.push_back(make_vector_tensor<T>(prefix + "b_k_" + s, e.key_bias));
  }
  if (!layer.value_bias().empty()) {
    out.push_back(
        make_vector_tensor<T>(prefix + "b_v", {layer.value_bias().begin(), layer.value_bias().end()}));
  }
  if (!layer.gate_bias().empty()) {
    out.push_back(
        make_vector_tensor<T>(prefix + "b_g", {layer.gate_bias().begin(), layer.gate_bias().end()}));
  }
}

template <Real T>
EmoeLayer<T> emoe_from_tensors(const TensorList& tensors, const Partition& partition,
                               const std::string& prefix = "") {
  const auto meta = require_tensor(tensors, prefix + "meta").values_as<double>();
  if (meta.size() < 6) {
    throw ValidationError("split layer meta needs [h, d, activation, N, top_k, gate_mode]");
  }
  const auto h = detail::meta_count(meta, 0, "h");
  const auto d = detail::meta_count(meta, 1, "d");
  const auto act = activation_from_code(meta[2]);
  const auto n = detail::meta_count(meta, 3, "N");
  const auto top_k = detail::meta_count(meta, 4, "top_k");
  const auto mode_code = detail::meta_count(meta, 5, "gate_mode");
  if (mode_code > 1) throw ValidationError("unknown gate mode " + std::to_string(mode_code));
  if (partition.d() != d || partition.n_experts() != n) {
    throw ValidationError("partition side-car does not match layer meta");
  }
  const std::size_t m = d / n;
  const auto& G = require_tensor(tensors, prefix + "G");
  detail::check_dims<T>(G, h, n);

  auto groups = partition.groups();
  std::vector<Expert<T>> experts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = std::to_string(i);
    const auto& K = require_tensor(tensors, prefix + "K_" + s);
    const auto& V = require_tensor(tensors, prefix + "V_" + s);
    detail::check_dims<T>(K, h, m);
    detail::check_dims<T>(V, m, h);
    experts[i].neurons = std::move(groups[i]);
    experts[i].keys = K.as_matrix<T>();
    experts[i].values = V.as_matrix<T>();
    experts[i].key_bias = detail::optional_vector<T>(tensors, prefix + "b_k_" + s, m);
  }
  try {
    return EmoeLayer<T>(std::move(experts), G.as_matrix<T>(), act, top_k,
                        static_cast<GateMode>(mode_code),
                        detail::optional_vector<T>(tensors, prefix + "b_v", h),
                        detail::optional_vector<T>(tensors, prefix + "b_g", n));
  } catch (const ValidationError&) {
    throw;
  } catch (const Error& e) {
    throw ValidationError(std::string("invalid split layer: ") + e.what());
  }
}

inline std::filesystem::path partition_sidecar(const std::filesystem::path& layer_path) {
  auto p = layer_path;
  p += ".partition";
  return p;
}

template <Real T>
void write_ffn(const std::filesystem::path& path, const FfnLayer<T>& layer) {
  TensorList t;
  append_ffn_tensors(t, layer);
  write_tensors(path, t);
}

template <Real T>
FfnLayer<T> read_ffn(const std::filesystem::path& path) {
  const auto tensors = read_tensors(path);
  if (detect_layer_kind(tensors) != LayerKind::Dense) {
    throw ValidationError(path.string() + ": not a dense layer file");
  }
  return ffn_from_tensors<T>(tensors);
}

/// Writes the layer and its partition side-car.
template <Real T>
void write_emoe(const std::filesystem::path& path, const EmoeLayer<T>& layer) {
  TensorList t;
  append_emoe_tensors(t, layer);
  write_tensors(path, t);
  write_partition(partition_sidecar(path), layer.partition());
}

template <Real T>
EmoeLayer<T> read_emoe(const std::filesystem::path& path) {
  const auto tensors = read_tensors(path);
  if (detect_layer_kind(tensors) != LayerKind::Split) {
    throw ValidationError(path.string() + ": not a split layer file");
  }
  return emoe_from_tensors<T>(tensors, read_partition(partition_sidecar(path)));
}

// ---------------------------------------------------------------------------
// Comma-separated exports

namespace detail {
inline void csv_number(std::ostream& os, double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  os << s.str();
}
}  // namespace detail

/// Header "task,expert_0,...,expert_{N-1}", one row per task. Frequencies by
/// default, raw counts when `raw_counts` is set.
inline void write_heatmap_csv(std::ostream& os, const Heatmap& heatmap, bool raw_counts = false) {
  const auto& m = raw_counts ? heatmap.counts : heatmap.frequencies;
  os << "task";
  for (std::size_t i = 0; i < m.cols(); ++i) os << ",expert_" << i;
  os << '\n';
  for (std::size_t r = 0; r < heatmap.tasks.size(); ++r) {
    os << heatmap.tasks[r];
    for (std::size_t i = 0; i < m.cols(); ++i) {
      os << ',';
      detail::csv_number(os, m(r, i));
    }
    os << '\n';
  }
}

inline void write_heatmap_csv(const std::filesystem::path& path, const Heatmap& heatmap,
                              bool raw_counts = false) {
  std::ostringstream os;
  write_heatmap_csv(os, heatmap, raw_counts);
  detail::write_file(path, os.str());
}

}  // namespace emoe
