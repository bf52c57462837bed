#pragma once

// The auxiliary layer: a hidden layer whose input is the incoming auxiliary
// features concatenated with the previous hidden activations, and whose
// nodes are coupled one-to-one with auxiliary features. Each step, nodes of
// unavailable features are dropped (selective dropout) and the leftover
// nodes are dropped at random so that |nodes| * d are dropped in
// expectation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "auxdrop/instance.hpp"
#include "auxdrop/nn.hpp"
#include "auxdrop/rng.hpp"

namespace auxdrop {

enum class RandomDropMode {
  Bernoulli,   // independent draw per leftover node with probability p_k
  ExactCount,  // exactly round(|M| d) - |selective| leftover nodes
};

struct AuxEntry {
  std::size_t node = 0;  // AuxLayer node index
  std::size_t slot = 0;  // position in the auxiliary part of the input
};

/// A layer fed by the auxiliary layer's output; grows one column per new node.
struct AuxConsumer {
  DenseLayer* layer = nullptr;
  std::uint64_t init_key = 0;
};

struct AuxLayerState {
  DenseLayer layer;                          // [node_count x (aux slots + hidden_width)]
  std::map<FeatureId, AuxEntry> aux_registry;
  std::size_t non_aux_count = 0;
  std::size_t hidden_width = 0;
  double dropout_rate = 0.3;
  std::size_t position = 1;                  // 1-based hidden-layer index z
  RandomDropMode drop_mode = RandomDropMode::Bernoulli;
  bool inverted_scaling = false;
  KeyedRng init_rng;
  std::uint64_t init_key = 0;

  [[nodiscard]] std::size_t node_count() const noexcept { return layer.out_dim(); }
  [[nodiscard]] std::size_t aux_count() const noexcept { return aux_registry.size(); }
  [[nodiscard]] std::size_t input_width() const noexcept { return aux_count() + hidden_width; }
  [[nodiscard]] bool is_registered(FeatureId id) const { return aux_registry.contains(id); }

  friend bool operator==(const AuxLayerState& a, const AuxLayerState& b) {
    auto same_registry = [&] {
      if (a.aux_registry.size() != b.aux_registry.size()) return false;
      return std::equal(a.aux_registry.begin(), a.aux_registry.end(), b.aux_registry.begin(), [](auto& x, auto& y) {
        return x.first == y.first && x.second.node == y.second.node && x.second.slot == y.second.slot;
      });
    };
    return a.layer == b.layer && same_registry() && a.non_aux_count == b.non_aux_count &&
           a.hidden_width == b.hidden_width && a.position == b.position;
  }
};

namespace detail {

constexpr std::uint64_t kAuxSlotColumn = 1ULL << 40;

inline std::uint64_t aux_column_key(const AuxLayerState& s, std::size_t col) {
  return col < s.aux_count() ? kAuxSlotColumn | col : col - s.aux_count();
}

inline double aux_weight(const AuxLayerState& s, double limit, std::size_t node, std::uint64_t col_key) {
  return init_value(s.init_rng, limit, {s.init_key, node, col_key});
}

}  // namespace detail

inline std::size_t register_sudden_feature(AuxLayerState& state, FeatureId id, std::span<const AuxConsumer> consumers = {});

/// Builds `total_nodes - declared.size()` non-auxiliary nodes over the hidden
/// input, then registers each declared feature exactly as a sudden feature
/// would be, so declaring a feature up front and discovering it later build
/// the same parameters.
inline AuxLayerState make_aux_layer(std::span<const FeatureId> declared, std::size_t total_nodes, std::size_t hidden_width,
                                    double dropout_rate, std::size_t position, const KeyedRng& init_rng,
                                    std::uint64_t init_key) {
  if (declared.size() > total_nodes)
    throw std::invalid_argument("aux layer: " + std::to_string(declared.size()) + " declared auxiliary features > " +
                                std::to_string(total_nodes) + " nodes");
  AuxLayerState s;
  s.non_aux_count = total_nodes - declared.size();
  s.hidden_width = hidden_width;
  s.dropout_rate = dropout_rate;
  s.position = position;
  s.init_rng = init_rng;
  s.init_key = init_key;
  s.layer = DenseLayer(hidden_width, s.non_aux_count, Activation::ReLU);
  const double limit = glorot_limit(s.layer.in_dim(), std::max<std::size_t>(1, s.layer.out_dim()));
  for (std::size_t r = 0; r < s.layer.out_dim(); ++r)
    for (std::size_t c = 0; c < s.layer.in_dim(); ++c)
      s.layer.weights(r, c) = detail::aux_weight(s, limit, r, detail::aux_column_key(s, c));
  for (FeatureId id : declared) {
    if (s.is_registered(id)) throw std::invalid_argument("aux layer: duplicate feature id " + std::to_string(id));
    register_sudden_feature(s, id, {});
  }
  return s;
}

struct AuxInput {
  Vector aux_values;   // aligned to registration slots, zero where unavailable
  Vector hidden_prev;
  Vector concatenated; // [aux_values || hidden_prev]
};

inline AuxInput build_aux_input(std::span<const double> hidden_prev, const FeatureValues& available,
                                const AuxLayerState& state) {
  if (hidden_prev.size() != state.hidden_width) throw DimensionError("build_aux_input: hidden width mismatch");
  AuxInput in;
  in.aux_values.assign(state.aux_count(), 0.0);
  for (const auto& [id, value] : available) {
    auto it = state.aux_registry.find(id);
    if (it == state.aux_registry.end())
      throw std::logic_error("build_aux_input: feature " + std::to_string(id) + " is not registered");
    in.aux_values[it->second.slot] = value;
  }
  in.hidden_prev.assign(hidden_prev.begin(), hidden_prev.end());
  in.concatenated = in.aux_values;
  in.concatenated.insert(in.concatenated.end(), hidden_prev.begin(), hidden_prev.end());
  return in;
}

enum class NodeDrop : std::uint8_t { Kept = 0, Selective = 1, Random = 2 };

struct DropoutMask {
  std::vector<std::size_t> selective;
  std::vector<std::size_t> random;
  std::vector<std::size_t> kept;
  double per_node_prob = 0.0;
  bool clamped = false;
  std::vector<NodeDrop> state;  // per node

  [[nodiscard]] std::size_t node_count() const noexcept { return state.size(); }
  [[nodiscard]] std::size_t dropped_count() const noexcept { return selective.size() + random.size(); }
  [[nodiscard]] bool is_kept(std::size_t node) const { return state[node] == NodeDrop::Kept; }

  [[nodiscard]] NodeMask node_mask(double scale = 1.0) const {
    NodeMask m;
    m.keep.resize(state.size());
    for (std::size_t i = 0; i < state.size(); ++i) m.keep[i] = state[i] == NodeDrop::Kept;
    m.scale = scale;
    return m;
  }
};

namespace detail {

inline DropoutMask finalize(std::vector<NodeDrop> state, double p, bool clamped) {
  DropoutMask m;
  m.per_node_prob = p;
  m.clamped = clamped;
  for (std::size_t i = 0; i < state.size(); ++i) {
    switch (state[i]) {
      case NodeDrop::Kept: m.kept.push_back(i); break;
      case NodeDrop::Selective: m.selective.push_back(i); break;
      case NodeDrop::Random: m.random.push_back(i); break;
    }
  }
  m.state = std::move(state);
  return m;
}

inline double draw(const KeyedRng& rng, std::uint64_t stream, std::uint64_t step, std::size_t node) {
  return rng.uniform(RngTag::AuxDropout, {stream, step, node});
}

// Drops leftover nodes given the target (real-valued) drop count.
inline DropoutMask drop_leftover(std::vector<NodeDrop> state, std::size_t selective_count, double target,
                                 RandomDropMode mode, const KeyedRng& rng, std::uint64_t stream, std::uint64_t step) {
  const std::size_t n = state.size();
  const std::size_t leftover = n - selective_count;
  const double remaining = target - static_cast<double>(selective_count);
  const bool clamped = remaining < 0.0;
  if (leftover == 0) return finalize(std::move(state), 0.0, clamped);

  if (mode == RandomDropMode::Bernoulli) {
    const double p = std::clamp(remaining / static_cast<double>(leftover), 0.0, 1.0);
    for (std::size_t k = 0; k < n; ++k)
      if (state[k] == NodeDrop::Kept && draw(rng, stream, step, k) < p) state[k] = NodeDrop::Random;
    return finalize(std::move(state), p, clamped);
  }

  const double rounded = std::round(target) - static_cast<double>(selective_count);
  const auto count = static_cast<std::size_t>(std::clamp(rounded, 0.0, static_cast<double>(leftover)));
  std::vector<std::pair<double, std::size_t>> keyed;
  keyed.reserve(leftover);
  for (std::size_t k = 0; k < n; ++k)
    if (state[k] == NodeDrop::Kept) keyed.emplace_back(draw(rng, stream, step, k), k);
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(count), keyed.end());
  for (std::size_t i = 0; i < count; ++i) state[keyed[i].second] = NodeDrop::Random;
  return finalize(std::move(state), static_cast<double>(count) / static_cast<double>(leftover), clamped);
}

}  // namespace detail

/// Selective dropout on the nodes of unavailable features, then random
/// dropout of the leftover nodes with
///   p_k = (|M| d - |selective|) / (|M| - |selective|), clamped to [0, 1].
/// Draws are keyed by (seed, stream, step, node) so growth does not shift
/// the draws of existing nodes.
inline DropoutMask make_mask(const AuxLayerState& state, std::span<const FeatureId> available_ids, const KeyedRng& rng,
                             std::uint64_t step, std::uint64_t stream = 0) {
  std::vector<NodeDrop> drops(state.node_count(), NodeDrop::Kept);
  for (const auto& [id, entry] : state.aux_registry) drops[entry.node] = NodeDrop::Selective;
  for (FeatureId id : available_ids) {
    auto it = state.aux_registry.find(id);
    if (it == state.aux_registry.end())
      throw std::logic_error("make_mask: feature " + std::to_string(id) + " is not registered");
    drops[it->second.node] = NodeDrop::Kept;
  }
  const auto selective = static_cast<std::size_t>(std::count(drops.begin(), drops.end(), NodeDrop::Selective));
  const double target = static_cast<double>(state.node_count()) * state.dropout_rate;
  return detail::drop_leftover(std::move(drops), selective, target, state.drop_mode, rng, stream, step);
}

/// Random dropout only, at rate d over all nodes; availability is ignored.
inline DropoutMask make_random_mask(std::size_t node_count, double rate, RandomDropMode mode, const KeyedRng& rng,
                                    std::uint64_t step, std::uint64_t stream = 0) {
  return detail::drop_leftover(std::vector<NodeDrop>(node_count, NodeDrop::Kept), 0,
                               static_cast<double>(node_count) * rate, mode, rng, stream, step);
}

inline double kept_scale(const AuxLayerState& state) {
  return state.inverted_scaling && state.dropout_rate < 1.0 ? 1.0 / (1.0 - state.dropout_rate) : 1.0;
}

inline LayerCache masked_forward(const AuxLayerState& state, const AuxInput& input, const DropoutMask& mask) {
  if (mask.node_count() != state.node_count()) throw DimensionError("masked_forward: mask built for another layer");
  return dense_forward_cached(state.layer, input.concatenated, mask.node_mask(kept_scale(state)));
}

struct AuxBackward {
  GradientBuffer grads;
  Vector downstream;  // w.r.t. hidden_prev only
};

inline AuxBackward masked_backward(const AuxLayerState& state, const LayerCache& cache, std::span<const double> upstream,
                                   const DropoutMask& mask) {
  AuxBackward out{GradientBuffer(state.layer), {}};
  Vector full = dense_backward(state.layer, cache, upstream, mask.node_mask(kept_scale(state)), out.grads);
  out.downstream.assign(full.begin() + static_cast<std::ptrdiff_t>(state.aux_count()), full.end());
  return out;
}

/// Explicit freeze flags: incoming weights and bias of dropped nodes, and
/// every weight leaving an unavailable auxiliary input.
inline FreezeMask freeze_mask(const AuxLayerState& state, const DropoutMask& mask, std::span<const FeatureId> available_ids) {
  const std::size_t rows = state.node_count();
  const std::size_t cols = state.layer.in_dim();
  FreezeMask f;
  f.weights.assign(rows * cols, 0);
  f.bias.assign(rows, 0);
  std::vector<std::uint8_t> slot_missing(state.aux_count(), 1);
  for (FeatureId id : available_ids) {
    auto it = state.aux_registry.find(id);
    if (it != state.aux_registry.end()) slot_missing[it->second.slot] = 0;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const bool dropped = !mask.is_kept(r);
    f.bias[r] = dropped;
    for (std::size_t c = 0; c < cols; ++c) f.weights[r * cols + c] = dropped || (c < slot_missing.size() && slot_missing[c]);
  }
  return f;
}

/// Adds a node and an input slot for a newly seen feature, plus one column in
/// every consumer. Existing parameters are untouched.
inline std::size_t register_sudden_feature(AuxLayerState& state, FeatureId id, std::span<const AuxConsumer> consumers) {
  if (state.is_registered(id)) throw std::logic_error("register_sudden_feature: feature " + std::to_string(id) + " already registered");
  const std::size_t slot = state.aux_count();
  const std::size_t node = state.node_count();
  const std::size_t new_in = state.layer.in_dim() + 1;
  const std::size_t new_out = node + 1;
  const double limit = glorot_limit(new_in, new_out);

  Vector column(node);
  for (std::size_t r = 0; r < node; ++r) column[r] = detail::aux_weight(state, limit, r, detail::kAuxSlotColumn | slot);
  state.layer.weights.insert_column(slot, column);

  state.aux_registry.emplace(id, AuxEntry{node, slot});
  Vector row(new_in);
  for (std::size_t c = 0; c < new_in; ++c) row[c] = detail::aux_weight(state, limit, node, detail::aux_column_key(state, c));
  state.layer.weights.append_row(row);
  state.layer.bias.push_back(0.0);

  for (const AuxConsumer& consumer : consumers) {
    DenseLayer& next = *consumer.layer;
    const double next_limit = glorot_limit(next.in_dim() + 1, next.out_dim());
    Vector col(next.out_dim());
    for (std::size_t r = 0; r < col.size(); ++r) col[r] = init_value(state.init_rng, next_limit, {consumer.init_key, r, node});
    next.weights.insert_column(next.in_dim(), col);
  }
  return node;
}

struct BaseNetworkShape {
  std::size_t input_dim = 0;                // base features
  std::vector<std::size_t> hidden_widths;   // AuxLayer entry holds its configured width
  std::vector<std::size_t> head_layers;     // 0-based hidden layers that carry a head
  std::size_t num_classes = 2;
  std::size_t aux_net_hidden = 0;           // N_H for the Aux-Net comparison
};

struct ParamCount {
  std::size_t aux_drop = 0;       // P_D
  std::size_t base = 0;           // P_B
  std::size_t aux_net = 0;        // P_N
  std::size_t aux_net_delta = 0;  // P_N - P_B
};

/// P_D = P_B + N_Amax * M_aux and P_N = P_B + N_Amax * N_H + N_Amax * N_H * M_aux.
inline ParamCount param_count(std::size_t n_aux_max, std::size_t aux_nodes, const BaseNetworkShape& net) {
  ParamCount pc;
  std::size_t in = net.input_dim;
  for (std::size_t w : net.hidden_widths) {
    pc.base += in * w + w;
    in = w;
  }
  for (std::size_t l : net.head_layers) pc.base += net.hidden_widths.at(l) * net.num_classes + net.num_classes;
  pc.aux_drop = pc.base + n_aux_max * aux_nodes;
  pc.aux_net_delta = n_aux_max * net.aux_net_hidden + n_aux_max * net.aux_net_hidden * aux_nodes;
  pc.aux_net = pc.base + pc.aux_net_delta;
  return pc;
}

}  // namespace auxdrop
