#pragma once

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "auxdrop/model.hpp"
#include "auxdrop/streams.hpp"

namespace testing_support {

using namespace auxdrop;

inline DenseLayer random_layer(std::size_t in, std::size_t out, SequenceRng& rng, Activation act = Activation::ReLU) {
  DenseLayer l(in, out, act);
  for (double& w : l.weights.flat()) w = rng.uniform(-1, 1);
  for (double& b : l.bias) b = rng.uniform(-0.5, 0.5);
  return l;
}

inline ModelConfig toy_config(Backbone backbone, std::size_t depth, std::size_t aux_position) {
  ModelConfig c;
  c.backbone = backbone;
  c.n_base = 2;
  c.depth = depth;
  c.width = 4;
  c.aux_nodes = 6;
  c.aux_position = aux_position;
  c.dropout = 0.3;
  c.learning_rate = 0.1;
  return c;
}

/// Random instance over features 1..n_aux, each present with probability p.
inline HaphazardInstance random_instance(SequenceRng& rng, std::size_t n_base, std::size_t n_aux, double p, std::uint64_t t,
                                         std::size_t classes = 2) {
  HaphazardInstance inst;
  inst.t = t;
  for (std::size_t i = 0; i < n_base; ++i) inst.base.push_back(rng.uniform(-1, 1));
  for (FeatureId k = 1; k <= n_aux; ++k) {
    const double v = rng.uniform(-1, 1);
    if (rng.uniform() < p) inst.aux.emplace_back(k, v);
  }
  inst.label = rng.below(classes);
  return inst;
}

/// Synthetic table whose label depends on the first and last columns.
inline std::shared_ptr<const LabelledTable> synthetic_table(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  auto t = std::make_shared<LabelledTable>();
  t->rows = rows;
  t->cols = cols;
  SequenceRng rng(seed);
  for (std::size_t r = 0; r < rows; ++r) {
    double score = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = rng.uniform(-1, 1);
      t->values.push_back(v);
      if (c == 0 || c + 1 == cols) score += v;
    }
    t->labels.push_back(score > 0 ? 1 : 0);
  }
  t->class_names = {"0", "1"};
  return t;
}

inline std::string synthetic_csv(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  auto t = synthetic_table(rows, cols, seed);
  std::ostringstream os;
  os.precision(17);
  for (std::size_t r = 0; r < rows; ++r) {
    os << t->labels[r];
    for (std::size_t c = 0; c < cols; ++c) os << ',' << t->at(r, c);
    os << '\n';
  }
  return os.str();
}

}  // namespace testing_support
