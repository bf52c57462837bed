#pragma once

// Dense network primitives with hand-written forward and backward passes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "auxdrop/errors.hpp"
#include "auxdrop/rng.hpp"

namespace auxdrop {

using Vector = std::vector<double>;

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  [[nodiscard]] std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  [[nodiscard]] std::span<double> flat() noexcept { return data_; }
  [[nodiscard]] std::span<const double> flat() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Inserts a column before index `at`; `values` has one entry per row.
  void insert_column(std::size_t at, std::span<const double> values) {
    if (at > cols_ || values.size() != rows_) throw DimensionError("insert_column: shape mismatch");
    std::vector<double> grown(rows_ * (cols_ + 1));
    for (std::size_t r = 0; r < rows_; ++r) {
      const double* src = data_.data() + r * cols_;
      double* dst = grown.data() + r * (cols_ + 1);
      std::copy(src, src + at, dst);
      dst[at] = values[r];
      std::copy(src + at, src + cols_, dst + at + 1);
    }
    data_ = std::move(grown);
    ++cols_;
  }

  void append_row(std::span<const double> values) {
    if (values.size() != cols_) throw DimensionError("append_row: shape mismatch");
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

enum class Activation { ReLU, Identity };

struct DenseLayer {
  Matrix weights;  // [out_dim x in_dim]
  Vector bias;     // [out_dim]
  Activation activation = Activation::ReLU;

  DenseLayer() = default;
  DenseLayer(std::size_t in_dim, std::size_t out_dim, Activation act = Activation::ReLU)
      : weights(out_dim, in_dim), bias(out_dim, 0.0), activation(act) {}

  [[nodiscard]] std::size_t in_dim() const noexcept { return weights.cols(); }
  [[nodiscard]] std::size_t out_dim() const noexcept { return weights.rows(); }
  [[nodiscard]] std::size_t parameter_count() const noexcept { return weights.size() + bias.size(); }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Prediction heads are affine maps to class logits.
using ClassifierHead = DenseLayer;

inline ClassifierHead make_head(std::size_t in_dim, std::size_t num_classes) {
  return ClassifierHead(in_dim, num_classes, Activation::Identity);
}

struct GradientBuffer {
  Matrix weights;
  Vector bias;

  GradientBuffer() = default;
  explicit GradientBuffer(const DenseLayer& mirror)
      : weights(mirror.weights.rows(), mirror.weights.cols()), bias(mirror.bias.size(), 0.0) {}

  void zero() {
    weights.fill(0.0);
    std::fill(bias.begin(), bias.end(), 0.0);
  }
  [[nodiscard]] bool all_zero() const {
    auto z = [](double v) { return v == 0.0; };
    return std::all_of(weights.flat().begin(), weights.flat().end(), z) && std::all_of(bias.begin(), bias.end(), z);
  }
};

/// Per-parameter freeze flags; empty vectors mean nothing is frozen.
struct FreezeMask {
  std::vector<std::uint8_t> weights;
  std::vector<std::uint8_t> bias;

  [[nodiscard]] bool empty() const noexcept { return weights.empty() && bias.empty(); }
};

/// Keep indicators for a layer's output nodes. Empty keep vector keeps all.
struct NodeMask {
  std::vector<std::uint8_t> keep;
  double scale = 1.0;  // applied to kept activations

  [[nodiscard]] bool kept(std::size_t i) const noexcept { return keep.empty() || keep[i] != 0; }
};

struct LayerCache {
  Vector input;
  Vector pre_activation;
  Vector output;
};

inline double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

/// Uniform in [-limit, limit), keyed by a logical parameter identity.
inline double init_value(const KeyedRng& rng, double limit, std::initializer_list<std::uint64_t> keys) {
  return limit * (2.0 * rng.uniform(RngTag::Init, keys) - 1.0);
}

/// Fan-in scaled uniform weights keyed by (layer_key, row, col); zero bias.
inline void initialize(DenseLayer& layer, const KeyedRng& rng, std::uint64_t layer_key) {
  const double limit = glorot_limit(layer.in_dim(), layer.out_dim());
  for (std::size_t r = 0; r < layer.out_dim(); ++r)
    for (std::size_t c = 0; c < layer.in_dim(); ++c) layer.weights(r, c) = init_value(rng, limit, {layer_key, r, c});
  std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
}

inline double activate(Activation a, double x) noexcept {
  return a == Activation::ReLU ? (x > 0.0 ? x : 0.0) : x;
}

inline double activation_grad(Activation a, double pre) noexcept {
  return a == Activation::ReLU ? (pre > 0.0 ? 1.0 : 0.0) : 1.0;
}

/// Affine map plus activation, with masked nodes forced to zero output.
inline LayerCache dense_forward_cached(const DenseLayer& layer, std::span<const double> input, const NodeMask& mask = {}) {
  if (input.size() != layer.in_dim())
    throw DimensionError("dense_forward: input length " + std::to_string(input.size()) + " != in_dim " +
                         std::to_string(layer.in_dim()));
  if (!mask.keep.empty() && mask.keep.size() != layer.out_dim()) throw DimensionError("dense_forward: mask size");
  LayerCache cache;
  cache.input.assign(input.begin(), input.end());
  cache.pre_activation.resize(layer.out_dim());
  cache.output.resize(layer.out_dim());
  for (std::size_t r = 0; r < layer.out_dim(); ++r) {
    const auto w = layer.weights.row(r);
    double acc = layer.bias[r];
    for (std::size_t c = 0; c < w.size(); ++c) acc += w[c] * input[c];
    cache.pre_activation[r] = acc;
    cache.output[r] = mask.kept(r) ? activate(layer.activation, acc) * mask.scale : 0.0;
  }
  return cache;
}

inline Vector dense_forward(const DenseLayer& layer, std::span<const double> input) {
  return dense_forward_cached(layer, input).output;
}

/// Backward through one layer. Accumulates parameter gradients into `grads`
/// and returns d(loss)/d(input). Masked nodes pass no gradient.
inline Vector dense_backward(const DenseLayer& layer, const LayerCache& cache, std::span<const double> upstream,
                             const NodeMask& mask, GradientBuffer& grads) {
  if (upstream.size() != layer.out_dim()) throw DimensionError("dense_backward: upstream size");
  Vector downstream(layer.in_dim(), 0.0);
  for (std::size_t r = 0; r < layer.out_dim(); ++r) {
    if (!mask.kept(r)) continue;
    const double delta = upstream[r] * mask.scale * activation_grad(layer.activation, cache.pre_activation[r]);
    if (delta == 0.0) continue;
    grads.bias[r] += delta;
    auto g = grads.weights.row(r);
    const auto w = layer.weights.row(r);
    for (std::size_t c = 0; c < g.size(); ++c) {
      g[c] += delta * cache.input[c];
      downstream[c] += delta * w[c];
    }
  }
  return downstream;
}

inline Vector softmax(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("softmax: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= sum;
  return p;
}

struct XentResult {
  double loss = 0.0;
  Vector grad_logits;
  Vector probabilities;
};

/// Cross-entropy of softmax(logits) against a class index.
inline XentResult softmax_xent(std::span<const double> logits, std::size_t label) {
  if (logits.empty()) throw DimensionError("softmax_xent: empty logits");
  if (label >= logits.size()) throw DimensionError("softmax_xent: label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  XentResult out;
  out.loss = std::log(sum) - (logits[label] - mx);
  out.probabilities = softmax(logits);
  out.grad_logits = out.probabilities;
  out.grad_logits[label] -= 1.0;
  return out;
}

/// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// p <- p - lr * g on entries not flagged in `frozen`.
inline void sgd_step(std::span<double> params, std::span<const double> grads, double learning_rate,
                     std::span<const std::uint8_t> frozen = {}, const std::string& block = "params") {
  if (params.size() != grads.size()) throw DimensionError("sgd_step: shape mismatch in " + block);
  if (!frozen.empty() && frozen.size() != params.size()) throw DimensionError("sgd_step: freeze mask shape in " + block);
  if (!all_finite(grads)) throw NonFiniteError("sgd_step: non-finite gradient in " + block);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!frozen.empty() && frozen[i]) continue;
    params[i] -= learning_rate * grads[i];
  }
}

inline void sgd_step(DenseLayer& layer, const GradientBuffer& grads, double learning_rate, const FreezeMask& freeze = {},
                     const std::string& block = "layer") {
  if (grads.weights.rows() != layer.weights.rows() || grads.weights.cols() != layer.weights.cols())
    throw DimensionError("sgd_step: gradient shape mismatch in " + block);
  if (!all_finite(grads.weights.flat()) || !all_finite(grads.bias))
    throw NonFiniteError("sgd_step: non-finite gradient in " + block);
  sgd_step(layer.weights.flat(), grads.weights.flat(), learning_rate, freeze.weights, block + ".weights");
  sgd_step(layer.bias, grads.bias, learning_rate, freeze.bias, block + ".bias");
}

}  // namespace auxdrop
