// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// A transformer feed-forward layer read as a key-value memory:
//   y = act(x * K + b_k) * V + b_v
// Column j of K is the key of neuron j, row j of V its value.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "emoe/error.hpp"
#include "emoe/numerics.hpp"

namespace emoe {

/// Non-owning view of a strided sequence, used for key columns.
template <Real T>
class StridedView {
 public:
  StridedView(const T* first, std::size_t size, std::size_t stride) noexcept
      : first_(first), size_(size), stride_(stride) {}

  std::size_t size() const noexcept { return size_; }
  const T& operator[](std::size_t i) const noexcept { return first_[i * stride_]; }

  std::vector<T> to_vector() const {
    std::vector<T> out(size_);
    for (std::size_t i = 0; i < size_; ++i) out[i] = (*this)[i];
    return out;
  }

 private:
  const T* first_;
  std::size_t size_;
  std::size_t stride_;
};

template <Real T>
struct NeuronView {
  StridedView<T> key;        // K[:, j], length h
  std::span<const T> value;  // V[j, :], length h
};

template <Real T>
class FfnLayer {
 public:
  FfnLayer() = default;

  /// `key_bias` (length d) and `value_bias` (length h) are optional; pass
  /// empty vectors for a bias-free layer.
  FfnLayer(Matrix<T> keys, Matrix<T> values, ActivationKind activation,
           std::vector<T> key_bias = {}, std::vector<T> value_bias = {})
      : keys_(std::move(keys)),
        values_(std::move(values)),
        activation_(activation),
        key_bias_(std::move(key_bias)),
        value_bias_(std::move(value_bias)) {
    validate();
  }

  std::size_t h() const noexcept { return keys_.rows(); }
  std::size_t d() const noexcept { return keys_.cols(); }
  ActivationKind activation() const noexcept { return activation_; }

  const Matrix<T>& keys() const noexcept { return keys_; }
  const Matrix<T>& values() const noexcept { return values_; }
  Matrix<T>& mutable_keys() noexcept { return keys_; }
  Matrix<T>& mutable_values() noexcept { return values_; }

  bool has_bias() const noexcept { return !key_bias_.empty() || !value_bias_.empty(); }
  std::span<const T> key_bias() const noexcept { return key_bias_; }
  std::span<const T> value_bias() const noexcept { return value_bias_; }

  friend bool bitwise_equal(const FfnLayer& a, const FfnLayer& b) noexcept {
    return a.activation_ == b.activation_ && bitwise_equal(a.keys_, b.keys_) &&
           bitwise_equal(a.values_, b.values_) &&
           bitwise_equal<T>(a.key_bias_, b.key_bias_) &&
           bitwise_equal<T>(a.value_bias_, b.value_bias_);
  }

 private:
  void validate() const {
    if (keys_.rows() == 0 || keys_.cols() == 0) throw ShapeError("ffn: empty key matrix");
    if (values_.rows() != keys_.cols() || values_.cols() != keys_.rows()) {
      throw ShapeError("ffn: K is " + std::to_string(keys_.rows()) + "x" +
                       std::to_string(keys_.cols()) + " but V is " +
                       std::to_string(values_.rows()) + "x" + std::to_string(values_.cols()));
    }
    if (!key_bias_.empty() && key_bias_.size() != d()) throw ShapeError("ffn: key bias length");
    if (!value_bias_.empty() && value_bias_.size() != h()) {
      throw ShapeError("ffn: value bias length");
    }
  }

  Matrix<T> keys_;
  Matrix<T> values_;
  ActivationKind activation_ = ActivationKind::ReLU;
  std::vector<T> key_bias_;
  std::vector<T> value_bias_;
};

/// Activation scores before the nonlinearity: x * K (+ b_k).
template <Real T>
std::vector<T> pre_activations(const FfnLayer<T>& layer, std::span<const T> x) {
  if (x.size() != layer.h()) {
    throw ShapeError("ffn: input length " + std::to_string(x.size()) + " != h=" +
                     std::to_string(layer.h()));
  }
  auto a = vec_mat<T>(x, layer.keys());
  const auto bias = layer.key_bias();
  if (!bias.empty()) {
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += bias[j];
  }
  return a;
}

/// act(x * K) * V, accumulated over neurons in ascending index order.
template <Real T>
std::vector<T> ffn_forward(const FfnLayer<T>& layer, std::span<const T> x) {
  const auto pre = pre_activations(layer, x);
  const auto& values = layer.values();
  std::vector<accum_t<T>> acc(layer.h(), accum_t<T>{0});
  for (std::size_t j = 0; j < layer.d(); ++j) {
    const accum_t<T> s = activate<accum_t<T>>(layer.activation(), pre[j]);
    if (s == accum_t<T>{0}) continue;
    const auto vrow = values.row(j);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += s * vrow[c];
  }
  const auto vb = layer.value_bias();
  std::vector<T> y(layer.h());
  for (std::size_t c = 0; c < y.size(); ++c) {
    y[c] = static_cast<T>(vb.empty() ? acc[c] : acc[c] + vb[c]);
  }
  return y;
}

template <Real T>
NeuronView<T> neuron_view(const FfnLayer<T>& layer, std::size_t j) {
  if (j >= layer.d()) {
    throw ArgumentError("neuron index " + std::to_string(j) + " out of range [0, " +
                        std::to_string(layer.d()) + ")");
  }
  const auto& k = layer.keys();
  return {StridedView<T>(k.values().data() + j, k.rows(), k.cols()), layer.values().row(j)};
}

}  // namespace emoe
