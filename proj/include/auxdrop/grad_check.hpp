#pragma once

// Central-difference gradient oracle for a model under a fixed mask.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "auxdrop/model.hpp"

namespace auxdrop {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_frozen = 0;
  std::string worst_block;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  double denominator_floor = 1e-4;  // relative error = |a - n| / max(|a|, |n|, floor)
};

/// Objective the backward pass differentiates: the alpha-weighted sum of head
/// losses for ODL (alpha held constant) and the single head's loss for OGD.
inline double training_objective(const AuxDropModel& model, std::span<const double> base, const FeatureValues& aux,
                                 std::size_t label, const NetworkMask& mask) {
  const ForwardTrace tr = model.forward(base, aux, mask);
  double total = 0.0;
  for (std::size_t l = 0; l < tr.heads.size(); ++l) {
    const double loss = softmax_xent(tr.heads[l].output, label).loss;
    total += model.config().backbone == Backbone::Odl ? model.alphas()[l] * loss : loss;
  }
  return total;
}

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares analytic gradients with central differences over every unfrozen
/// parameter. `model` is perturbed in place and restored.
inline GradCheckReport finite_diff_check(AuxDropModel& model, const HaphazardInstance& inst, const NetworkMask& mask,
                                         const GradCheckOptions& opt = {}) {
  GradCheckReport rep;
  const FeatureValues& aux = model.config().base_only ? FeatureValues{} : inst.aux;
  const ForwardTrace tr = model.forward(inst.base, aux, mask);
  const ModelGradients g = model.backward(tr, inst.label, mask);

  auto probe = [&](std::span<double> params, std::span<const double> grads, std::span<const std::uint8_t> frozen,
                   const std::string& block) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!frozen.empty() && frozen[i]) {
        ++rep.skipped_frozen;
        continue;
      }
      const double saved = params[i];
      params[i] = saved + opt.step;
      const double up = training_objective(model, inst.base, aux, inst.label, mask);
      params[i] = saved - opt.step;
      const double down = training_objective(model, inst.base, aux, inst.label, mask);
      params[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double err = relative_error(grads[i], numeric, opt.denominator_floor);
      ++rep.checked;
      if (err > rep.max_relative_error) {
        rep.max_relative_error = err;
        rep.worst_block = block;
        rep.worst_index = i;
      }
    }
  };

  for (std::size_t i = 0; i < model.depth(); ++i) {
    DenseLayer& layer = model.hidden(i);
    FreezeMask freeze;
    if (model.is_aux_index(i)) freeze = freeze_mask(model.aux_layer(), mask.aux.value(), feature_ids(aux));
    const std::string name = "hidden[" + std::to_string(i) + "]";
    probe(layer.weights.flat(), g.layers[i].weights.flat(), freeze.weights, name + ".weights");
    probe(layer.bias, g.layers[i].bias, freeze.bias, name + ".bias");
  }
  for (std::size_t l = 0; l < model.head_count(); ++l) {
    ClassifierHead& head = model.head(l);
    const std::string name = "head[" + std::to_string(l) + "]";
    probe(head.weights.flat(), g.heads[l].weights.flat(), {}, name + ".weights");
    probe(head.bias, g.heads[l].bias, {}, name + ".bias");
  }
  rep.passed = rep.max_relative_error <= opt.tolerance;
  return rep;
}

}  // namespace auxdrop
