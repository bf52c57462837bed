#pragma once

// Online backbones with an auxiliary layer spliced in.
//
// OGD: a plain deep net whose prediction comes from a head on the last hidden
// layer. ODL: one head per hidden layer, predictions mixed by hedge weights
// alpha; each head is trained on its own loss and every shared layer receives
// the alpha-weighted sum of the gradients of the heads above it.
//
// Hidden layers before the auxiliary layer see only base features. The
// auxiliary layer consumes [aux features || previous hidden activations] and
// has no head under ODL, since its width changes as features appear.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "auxdrop/aux_layer.hpp"
#include "auxdrop/errors.hpp"
#include "auxdrop/instance.hpp"
#include "auxdrop/nn.hpp"
#include "auxdrop/rng.hpp"

namespace auxdrop {

enum class Backbone { Ogd, Odl };

enum class DropoutStrategy {
  AuxDrop,  // selective + random dropout in the auxiliary layer only
  Rdando,   // random dropout in the auxiliary layer, none elsewhere
  Rdal,     // random dropout in every hidden layer
  Adardo,   // auxiliary dropout in the auxiliary layer, random elsewhere
  Rdifl,    // no auxiliary layer; all features enter layer 1 with random dropout there
};

inline std::string to_string(Backbone b) { return b == Backbone::Ogd ? "ogd" : "odl"; }

inline std::string to_string(DropoutStrategy s) {
  switch (s) {
    case DropoutStrategy::AuxDrop: return "auxdrop";
    case DropoutStrategy::Rdando: return "rdando";
    case DropoutStrategy::Rdal: return "rdal";
    case DropoutStrategy::Adardo: return "adardo";
    case DropoutStrategy::Rdifl: return "rdifl";
  }
  return "?";
}

inline DropoutStrategy parse_strategy(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
  if (name == "auxdrop" || name == "aux-drop" || name == "aux_drop") return DropoutStrategy::AuxDrop;
  if (name == "rdando") return DropoutStrategy::Rdando;
  if (name == "rdal") return DropoutStrategy::Rdal;
  if (name == "adardo") return DropoutStrategy::Adardo;
  if (name == "rdifl") return DropoutStrategy::Rdifl;
  throw ConfigError("unknown dropout strategy '" + name + "' (expected auxdrop, rdando, rdal, adardo, rdifl)");
}

inline Backbone parse_backbone(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
  if (name == "ogd") return Backbone::Ogd;
  if (name == "odl") return Backbone::Odl;
  throw ConfigError("unknown backbone '" + name + "' (expected ogd or odl)");
}

/// How the per-instance loss is reported. ProbabilityLogits applies the
/// cross-entropy to the mixed probability vector as if it were logits.
enum class LossMetric { CrossEntropy, ProbabilityLogits };

struct ModelConfig {
  Backbone backbone = Backbone::Odl;
  DropoutStrategy strategy = DropoutStrategy::AuxDrop;
  bool base_only = false;  // ignore auxiliary features entirely, e.g. ODL(B)
  std::size_t n_base = 1;
  std::vector<FeatureId> declared_aux;  // auxiliary features known when the model is built
  std::size_t depth = 11;
  std::size_t width = 50;
  std::size_t aux_nodes = 100;
  std::size_t aux_position = 3;  // 1-based
  double dropout = 0.3;
  double learning_rate = 0.3;
  double discount = 0.99;   // hedge beta
  double smoothing = 0.2;   // hedge s
  std::size_t num_classes = 2;
  RandomDropMode drop_mode = RandomDropMode::Bernoulli;
  bool inverted_dropout = false;
  bool single_head = false;  // ODL with a head on the last layer only
  Activation hidden_activation = Activation::ReLU;
  LossMetric loss_metric = LossMetric::CrossEntropy;

  [[nodiscard]] bool uses_aux_layer() const noexcept { return !base_only && strategy != DropoutStrategy::Rdifl; }
};

struct ValidationReport {
  std::vector<std::string> warnings;
};

/// Hard errors throw ConfigError; soft ones come back as warnings.
inline ValidationReport validate(const ModelConfig& c) {
  ValidationReport report;
  auto fail = [](const std::string& what) { throw ConfigError("invalid model configuration: " + what); };
  if (c.depth < 1) fail("depth >= 1 violated");
  if (c.width < 1) fail("nodes >= 1 violated");
  if (c.n_base < 1) fail("at least one base feature is required (n_base >= 1)");
  if (c.num_classes < 2) fail("num_classes >= 2 violated");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) fail("0 <= dropout < 1 violated (dropout=" + std::to_string(c.dropout) + ")");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) fail("learning_rate >= 0 violated");
  if (!(c.discount > 0.0 && c.discount <= 1.0)) fail("0 < discount <= 1 violated");
  if (!(c.smoothing >= 0.0 && c.smoothing < 1.0)) fail("0 <= smoothing < 1 violated");
  if (c.uses_aux_layer()) {
    if (c.aux_position < 1 || c.aux_position > c.depth)
      fail("1 <= aux_position <= depth violated (aux_position=" + std::to_string(c.aux_position) +
           ", depth=" + std::to_string(c.depth) + ")");
    if (c.declared_aux.size() > c.aux_nodes)
      fail("declared auxiliary features <= aux_nodes violated (" + std::to_string(c.declared_aux.size()) + " > " +
           std::to_string(c.aux_nodes) + ")");
    const double target = static_cast<double>(c.aux_nodes) * c.dropout;
    if (target < static_cast<double>(c.declared_aux.size()))
      report.warnings.push_back("aux_nodes * dropout = " + std::to_string(target) + " < " +
                                std::to_string(c.declared_aux.size()) +
                                " auxiliary features; random dropout clamps to 0 when most features are missing");
    if (c.backbone == Backbone::Odl && (c.single_head ? c.aux_position == c.depth : c.depth == 1))
      fail("ODL needs at least one head outside the auxiliary layer");
  }
  return report;
}

/// alpha <- alpha * beta^clip(loss); alpha <- max(alpha, s / L); normalize.
inline void hedge_update(std::span<double> alphas, std::span<const double> losses, double beta, double smoothing) {
  if (alphas.size() != losses.size()) throw DimensionError("hedge_update: one loss per head required");
  const double floor = smoothing / static_cast<double>(alphas.size());
  for (std::size_t l = 0; l < alphas.size(); ++l) {
    alphas[l] *= std::pow(beta, std::clamp(losses[l], 0.0, 1.0));
    alphas[l] = std::max(alphas[l], floor);
  }
  double sum = 0.0;
  for (double a : alphas) sum += a;
  for (double& a : alphas) a /= sum;
}

/// Per-step dropout decisions for the whole network.
struct NetworkMask {
  std::optional<DropoutMask> aux;  // auxiliary layer
  std::vector<NodeMask> layers;    // other hidden layers; empty entry keeps all
};

struct ForwardTrace {
  std::vector<LayerCache> layers;
  std::optional<AuxInput> aux_input;
  std::vector<LayerCache> heads;
  std::vector<Vector> head_probabilities;
  Vector probabilities;
};

struct Prediction {
  Vector probabilities;
  std::vector<Vector> logits_per_head;
  std::size_t predicted = 0;
};

struct ModelGradients {
  std::vector<GradientBuffer> layers;
  std::vector<GradientBuffer> heads;
  std::vector<double> head_losses;
};

struct StepResult {
  std::uint64_t step = 0;
  double loss = 0.0;
  std::size_t predicted = 0;
  std::size_t label = 0;
  bool error = false;
  bool clamped = false;
  std::size_t registered = 0;  // features registered this step
};

class AuxDropModel {
 public:
  AuxDropModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), rng_(seed) {
    warnings_ = validate(config_).warnings;
    build();
  }

  [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
  [[nodiscard]] const std::vector<std::string>& warnings() const noexcept { return warnings_; }
  [[nodiscard]] std::size_t depth() const noexcept { return config_.depth; }
  [[nodiscard]] bool has_aux_layer() const noexcept { return aux_.has_value(); }
  [[nodiscard]] std::size_t aux_index() const noexcept { return config_.aux_position - 1; }
  [[nodiscard]] bool is_aux_index(std::size_t i) const noexcept { return aux_ && i == aux_index(); }
  [[nodiscard]] const AuxLayerState& aux_layer() const { return aux_.value(); }
  [[nodiscard]] AuxLayerState& aux_layer() { return aux_.value(); }

  [[nodiscard]] const DenseLayer& hidden(std::size_t i) const { return is_aux_index(i) ? aux_->layer : hidden_.at(i); }
  [[nodiscard]] DenseLayer& hidden(std::size_t i) { return is_aux_index(i) ? aux_->layer : hidden_.at(i); }
  [[nodiscard]] std::size_t head_count() const noexcept { return heads_.size(); }
  [[nodiscard]] const ClassifierHead& head(std::size_t l) const { return heads_.at(l); }
  [[nodiscard]] ClassifierHead& head(std::size_t l) { return heads_.at(l); }
  [[nodiscard]] std::size_t head_layer(std::size_t l) const { return head_layers_.at(l); }
  [[nodiscard]] const std::vector<double>& alphas() const noexcept { return alphas_; }
  void set_alphas(std::vector<double> a) {
    if (a.size() != heads_.size()) throw DimensionError("set_alphas: one weight per head required");
    alphas_ = std::move(a);
  }
  [[nodiscard]] std::uint64_t steps() const noexcept { return steps_; }
  [[nodiscard]] std::uint64_t clamp_events() const noexcept { return clamp_events_; }
  [[nodiscard]] const KeyedRng& rng() const noexcept { return rng_; }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < depth(); ++i) n += hidden(i).parameter_count();
    for (const auto& h : heads_) n += h.parameter_count();
    return n;
  }

  /// Input features known to the first layer (RDIFL) or the auxiliary layer.
  [[nodiscard]] bool is_registered(FeatureId id) const {
    if (aux_) return aux_->is_registered(id);
    return input_slots_.contains(id);
  }

  /// Registers every feature id not seen before. Returns how many were new.
  std::size_t register_features(const FeatureValues& aux) {
    if (config_.base_only) return 0;
    std::size_t added = 0;
    for (const auto& [id, value] : aux) {
      (void)value;
      if (is_registered(id)) continue;
      register_feature(id);
      ++added;
    }
    return added;
  }

  void register_feature(FeatureId id) {
    if (config_.base_only) return;
    if (aux_) {
      std::vector<AuxConsumer> consumers;
      if (aux_index() + 1 < depth()) consumers.push_back({&hidden_[aux_index() + 1], layer_key(aux_index() + 1)});
      for (std::size_t l = 0; l < heads_.size(); ++l)
        if (head_layers_[l] == aux_index()) consumers.push_back({&heads_[l], head_key(l)});
      register_sudden_feature(*aux_, id, consumers);
      return;
    }
    if (input_slots_.contains(id)) throw std::logic_error("register_feature: feature already registered");
    DenseLayer& first = hidden_[0];
    const std::size_t col = first.in_dim();
    const double limit = glorot_limit(col + 1, first.out_dim());
    Vector values(first.out_dim());
    for (std::size_t r = 0; r < values.size(); ++r) values[r] = init_value(rng_, limit, {layer_key(0), r, col});
    first.weights.insert_column(col, values);
    input_slots_.emplace(id, input_slots_.size());
  }

  /// Mask policy for this step, per the configured strategy.
  [[nodiscard]] NetworkMask make_masks(const FeatureValues& aux, std::uint64_t step) const {
    NetworkMask m;
    m.layers.resize(depth());
    const double d = config_.dropout;
    auto random_layer = [&](std::size_t i) {
      const DropoutMask dm = make_random_mask(hidden(i).out_dim(), d, config_.drop_mode, rng_, step, i);
      m.layers[i] = dm.node_mask(scale());
    };
    if (config_.base_only) return m;
    switch (config_.strategy) {
      case DropoutStrategy::AuxDrop:
        m.aux = make_mask(*aux_, feature_ids(aux), rng_, step, aux_index());
        break;
      case DropoutStrategy::Rdando:
        m.aux = make_random_mask(aux_->node_count(), d, config_.drop_mode, rng_, step, aux_index());
        break;
      case DropoutStrategy::Rdal:
        m.aux = make_random_mask(aux_->node_count(), d, config_.drop_mode, rng_, step, aux_index());
        for (std::size_t i = 0; i < depth(); ++i)
          if (!is_aux_index(i)) random_layer(i);
        break;
      case DropoutStrategy::Adardo:
        m.aux = make_mask(*aux_, feature_ids(aux), rng_, step, aux_index());
        for (std::size_t i = 0; i < depth(); ++i)
          if (!is_aux_index(i)) random_layer(i);
        break;
      case DropoutStrategy::Rdifl:
        random_layer(0);
        break;
    }
    return m;
  }

  [[nodiscard]] ForwardTrace forward(std::span<const double> base, const FeatureValues& aux, const NetworkMask& mask) const {
    if (base.size() != config_.n_base) throw DimensionError("forward: expected " + std::to_string(config_.n_base) + " base features");
    ForwardTrace tr;
    tr.layers.reserve(depth());
    Vector x = input_vector(base, aux);
    for (std::size_t i = 0; i < depth(); ++i) {
      if (is_aux_index(i)) {
        tr.aux_input = build_aux_input(x, aux, *aux_);
        tr.layers.push_back(masked_forward(*aux_, *tr.aux_input, mask.aux.value()));
      } else {
        tr.layers.push_back(dense_forward_cached(hidden_[i], x, i < mask.layers.size() ? mask.layers[i] : NodeMask{}));
      }
      x = tr.layers.back().output;
    }
    tr.probabilities.assign(config_.num_classes, 0.0);
    for (std::size_t l = 0; l < heads_.size(); ++l) {
      tr.heads.push_back(dense_forward_cached(heads_[l], tr.layers[head_layers_[l]].output));
      tr.head_probabilities.push_back(softmax(tr.heads.back().output));
    }
    if (config_.backbone == Backbone::Ogd) {
      tr.probabilities = tr.head_probabilities.front();
    } else {
      for (std::size_t l = 0; l < heads_.size(); ++l)
        for (std::size_t k = 0; k < config_.num_classes; ++k) tr.probabilities[k] += alphas_[l] * tr.head_probabilities[l][k];
    }
    return tr;
  }

  [[nodiscard]] Prediction predict(std::span<const double> base, const FeatureValues& aux, const NetworkMask& mask) const {
    ForwardTrace tr = forward(base, aux, mask);
    Prediction p;
    p.probabilities = tr.probabilities;
    for (auto& h : tr.heads) p.logits_per_head.push_back(h.output);
    p.predicted = argmax(p.probabilities);
    return p;
  }

  /// Gradients of sum_l alpha_l * loss_l (OGD: the single head's loss).
  [[nodiscard]] ModelGradients backward(const ForwardTrace& tr, std::size_t label, const NetworkMask& mask) const {
    ModelGradients g;
    g.layers.reserve(depth());
    for (std::size_t i = 0; i < depth(); ++i) g.layers.emplace_back(hidden(i));
    std::vector<Vector> upstream(depth());
    for (std::size_t i = 0; i < depth(); ++i) upstream[i].assign(hidden(i).out_dim(), 0.0);

    for (std::size_t l = 0; l < heads_.size(); ++l) {
      XentResult xe = softmax_xent(tr.heads[l].output, label);
      g.head_losses.push_back(xe.loss);
      if (config_.backbone == Backbone::Odl)
        for (double& v : xe.grad_logits) v *= alphas_[l];
      g.heads.emplace_back(heads_[l]);
      Vector down = dense_backward(heads_[l], tr.heads[l], xe.grad_logits, {}, g.heads.back());
      Vector& up = upstream[head_layers_[l]];
      for (std::size_t k = 0; k < up.size(); ++k) up[k] += down[k];
    }
    for (std::size_t i = depth(); i-- > 0;) {
      Vector down;
      if (is_aux_index(i)) {
        AuxBackward ab = masked_backward(*aux_, tr.layers[i], upstream[i], mask.aux.value());
        g.layers[i] = std::move(ab.grads);
        down = std::move(ab.downstream);
      } else {
        down = dense_backward(hidden_[i], tr.layers[i], upstream[i], i < mask.layers.size() ? mask.layers[i] : NodeMask{},
                              g.layers[i]);
      }
      if (i > 0)
        for (std::size_t k = 0; k < down.size(); ++k) upstream[i - 1][k] += down[k];
    }
    return g;
  }

  /// SGD on every layer; the auxiliary layer additionally honours its freeze mask.
  void apply(const ModelGradients& g, const NetworkMask& mask, const FeatureValues& aux) {
    const double lr = config_.learning_rate;
    for (std::size_t i = 0; i < depth(); ++i) {
      const std::string name = "hidden[" + std::to_string(i) + "]";
      if (is_aux_index(i)) {
        const FreezeMask freeze = freeze_mask(*aux_, mask.aux.value(), feature_ids(aux));
        sgd_step(aux_->layer, g.layers[i], lr, freeze, name + "(aux)");
      } else {
        sgd_step(hidden_[i], g.layers[i], lr, {}, name);
      }
    }
    for (std::size_t l = 0; l < heads_.size(); ++l) sgd_step(heads_[l], g.heads[l], lr, {}, "head[" + std::to_string(l) + "]");
  }

  /// One prequential step: register new features, mask, predict, reveal the
  /// label, backpropagate with freezing, update, then adapt hedge weights.
  StepResult train_step(const HaphazardInstance& inst) {
    StepResult r;
    r.step = ++steps_;
    r.registered = register_features(inst.aux);
    const FeatureValues& aux = config_.base_only ? empty_ : inst.aux;
    const NetworkMask mask = make_masks(aux, r.step);
    if (mask.aux && mask.aux->clamped) {
      r.clamped = true;
      ++clamp_events_;
    }
    const ForwardTrace tr = forward(inst.base, aux, mask);
    r.predicted = argmax(tr.probabilities);
    r.label = inst.label;
    r.error = r.predicted != inst.label;
    r.loss = config_.loss_metric == LossMetric::CrossEntropy ? -std::log(tr.probabilities.at(inst.label))
                                                             : softmax_xent(tr.probabilities, inst.label).loss;
    if (!std::isfinite(r.loss))
      throw NonFiniteError("non-finite loss at step " + std::to_string(r.step) + " (p[label]=" +
                           std::to_string(tr.probabilities.at(inst.label)) + ")");
    const ModelGradients g = backward(tr, inst.label, mask);
    apply(g, mask, aux);
    if (config_.backbone == Backbone::Odl) hedge_update(alphas_, g.head_losses, config_.discount, config_.smoothing);
    return r;
  }

  friend bool operator==(const AuxDropModel& a, const AuxDropModel& b) {
    return a.hidden_ == b.hidden_ && a.heads_ == b.heads_ && a.alphas_ == b.alphas_ && a.aux_ == b.aux_ &&
           a.input_slots_ == b.input_slots_;
  }

 private:
  static std::uint64_t layer_key(std::size_t i) noexcept { return i + 1; }
  static std::uint64_t head_key(std::size_t l) noexcept { return 1000 + l; }

  [[nodiscard]] double scale() const noexcept {
    return config_.inverted_dropout && config_.dropout < 1.0 ? 1.0 / (1.0 - config_.dropout) : 1.0;
  }

  [[nodiscard]] Vector input_vector(std::span<const double> base, const FeatureValues& aux) const {
    Vector x(base.begin(), base.end());
    if (aux_ || config_.base_only) return x;
    x.resize(config_.n_base + input_slots_.size(), 0.0);
    for (const auto& [id, value] : aux) {
      auto it = input_slots_.find(id);
      if (it == input_slots_.end()) throw std::logic_error("forward: feature " + std::to_string(id) + " is not registered");
      x[config_.n_base + it->second] = value;
    }
    return x;
  }

  // Layers are built for base features only; declared features are then
  // registered through the same growth path a sudden feature takes.
  void build() {
    const ModelConfig& c = config_;
    const bool aux_layer = c.uses_aux_layer();
    hidden_.assign(c.depth, DenseLayer{});
    std::size_t in = c.n_base;
    for (std::size_t i = 0; i < c.depth; ++i) {
      if (aux_layer && i == c.aux_position - 1) {
        aux_ = make_aux_layer({}, c.aux_nodes - c.declared_aux.size(), in, c.dropout, c.aux_position, rng_, layer_key(i));
        aux_->drop_mode = c.drop_mode;
        aux_->inverted_scaling = c.inverted_dropout;
        aux_->layer.activation = c.hidden_activation;
        in = aux_->node_count();
        continue;
      }
      hidden_[i] = DenseLayer(in, c.width, c.hidden_activation);
      initialize(hidden_[i], rng_, layer_key(i));
      in = c.width;
    }
    if (c.backbone == Backbone::Ogd || c.single_head) {
      head_layers_.push_back(c.depth - 1);
    } else {
      for (std::size_t i = 0; i < c.depth; ++i)
        if (!is_aux_index(i)) head_layers_.push_back(i);
    }
    for (std::size_t l = 0; l < head_layers_.size(); ++l) {
      heads_.push_back(make_head(hidden(head_layers_[l]).out_dim(), c.num_classes));
      initialize(heads_.back(), rng_, head_key(l));
    }
    alphas_.assign(heads_.size(), 1.0 / static_cast<double>(heads_.size()));
    if (c.base_only) return;
    for (FeatureId id : c.declared_aux) {
      if (is_registered(id)) throw ConfigError("duplicate declared feature id " + std::to_string(id));
      register_feature(id);
    }
  }

  ModelConfig config_;
  KeyedRng rng_;
  std::vector<std::string> warnings_;
  std::vector<DenseLayer> hidden_;  // entry at the auxiliary index is unused
  std::optional<AuxLayerState> aux_;
  std::map<FeatureId, std::size_t> input_slots_;  // RDIFL first-layer slots
  std::vector<ClassifierHead> heads_;
  std::vector<std::size_t> head_layers_;
  std::vector<double> alphas_;
  std::uint64_t steps_ = 0;
  std::uint64_t clamp_events_ = 0;
  FeatureValues empty_;
};

/// Architecture summary for parameter counting of a built configuration.
inline BaseNetworkShape base_shape(const ModelConfig& c, std::size_t aux_net_hidden = 0) {
  BaseNetworkShape s;
  s.input_dim = c.n_base;
  s.num_classes = c.num_classes;
  s.aux_net_hidden = aux_net_hidden;
  const bool aux = c.uses_aux_layer();
  for (std::size_t i = 0; i < c.depth; ++i) s.hidden_widths.push_back(aux && i == c.aux_position - 1 ? c.aux_nodes : c.width);
  if (c.backbone == Backbone::Ogd || c.single_head) {
    s.head_layers.push_back(c.depth - 1);
  } else {
    for (std::size_t i = 0; i < c.depth; ++i)
      if (!(aux && i == c.aux_position - 1)) s.head_layers.push_back(i);
  }
  return s;
}

}  // namespace auxdrop
