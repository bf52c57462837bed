#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "auxdrop/grad_check.hpp"
#include "auxdrop/nn.hpp"
#include "test_support.hpp"

using namespace auxdrop;

TEST(DenseForward, IdentityWeightsClipNegativeWithReLU) {
  DenseLayer l(2, 2, Activation::ReLU);
  l.weights(0, 0) = 1;
  l.weights(1, 1) = 1;
  const Vector x{2, -3};
  EXPECT_EQ(dense_forward(l, x), (Vector{2, 0}));
}

TEST(DenseForward, ZeroWeightsPassOnlyBias) {
  DenseLayer l(2, 1, Activation::Identity);
  l.bias[0] = 5;
  const Vector x{7, 7};
  EXPECT_EQ(dense_forward(l, x), (Vector{5}));
}

TEST(DenseForward, MatchesTripleLoopOracle) {
  SequenceRng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    DenseLayer l = testing_support::random_layer(4, 3, rng, Activation::Identity);
    Vector x(4);
    for (double& v : x) v = rng.uniform(-2, 2);
    const Vector y = dense_forward(l, x);
    for (std::size_t r = 0; r < 3; ++r) {
      double acc = l.bias[r];
      for (std::size_t c = 0; c < 4; ++c) acc += l.weights(r, c) * x[c];
      EXPECT_NEAR(y[r], acc, 1e-12);
    }
  }
}

TEST(DenseForward, RejectsWrongInputLength) {
  DenseLayer l(3, 2);
  const Vector x{1, 2};
  EXPECT_THROW(dense_forward(l, x), DimensionError);
}

TEST(DenseForward, CachesPreActivation) {
  DenseLayer l(1, 1, Activation::ReLU);
  l.weights(0, 0) = -1;
  const Vector x{4};
  const LayerCache c = dense_forward_cached(l, x);
  EXPECT_EQ(c.pre_activation[0], -4);
  EXPECT_EQ(c.output[0], 0);
}

TEST(SoftmaxXent, UniformLogitsGiveLn2) {
  const Vector z{0, 0};
  EXPECT_NEAR(softmax_xent(z, 0).loss, std::log(2.0), 1e-12);
}

TEST(SoftmaxXent, LargeLogitsDoNotOverflow) {
  const Vector z{1000, 0};
  const auto r = softmax_xent(z, 0);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, 0.0, 1e-12);
  EXPECT_TRUE(all_finite(r.grad_logits));
}

TEST(SoftmaxXent, GradientMatchesCentralDifferences) {
  SequenceRng rng(5);
  const double h = 1e-5;
  for (int trial = 0; trial < 50; ++trial) {
    Vector z(2 + trial % 4);
    for (double& v : z) v = rng.uniform(-3, 3);
    const std::size_t label = rng.below(z.size());
    const auto r = softmax_xent(z, label);
    for (std::size_t k = 0; k < z.size(); ++k) {
      Vector up = z, down = z;
      up[k] += h;
      down[k] -= h;
      const double numeric = (softmax_xent(up, label).loss - softmax_xent(down, label).loss) / (2 * h);
      EXPECT_NEAR(r.grad_logits[k], numeric, 1e-6);
    }
  }
}

TEST(SoftmaxXent, EmptyLogitsRejected) {
  const Vector z;
  EXPECT_THROW(softmax_xent(z, 0), DimensionError);
  const Vector two{1, 2};
  EXPECT_THROW(softmax_xent(two, 2), DimensionError);
}

TEST(Softmax, SumsToOneWithComponentsInUnitInterval) {
  SequenceRng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    Vector z(1 + rng.below(6));
    for (double& v : z) v = rng.uniform(-50, 50);
    const Vector p = softmax(z);
    double sum = 0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Argmax, LowestIndexWinsTies) {
  const Vector v{0.5, 0.5};
  EXPECT_EQ(argmax(v), 0u);
}

TEST(SgdStep, PlainUpdate) {
  Vector p{1, 1};
  const Vector g{1, 0};
  sgd_step(p, g, 0.1);
  EXPECT_DOUBLE_EQ(p[0], 0.9);
  EXPECT_DOUBLE_EQ(p[1], 1.0);
}

TEST(SgdStep, FrozenEntriesUnchanged) {
  Vector p{1, 1};
  const Vector g{1, 1};
  const std::vector<std::uint8_t> frozen{1, 0};
  sgd_step(p, g, 0.1, frozen);
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_DOUBLE_EQ(p[1], 0.9);
}

TEST(SgdStep, NonFiniteGradientNamesBlock) {
  DenseLayer l(2, 1);
  GradientBuffer g(l);
  g.bias[0] = std::numeric_limits<double>::quiet_NaN();
  const DenseLayer before = l;
  try {
    sgd_step(l, g, 0.1, {}, "hidden[4]");
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("hidden[4]"), std::string::npos);
  }
  EXPECT_EQ(l, before);
}

TEST(SgdStep, ShapeMismatchRejected) {
  Vector p{1, 1};
  const Vector g{1};
  EXPECT_THROW(sgd_step(p, g, 0.1), DimensionError);
}

TEST(SgdStep, ConvexQuadraticDecreasesMonotonically) {
  // f(x) = 0.5 * sum a_i (x_i - c_i)^2
  SequenceRng rng(3);
  Vector a(5), c(5), x(5);
  for (std::size_t i = 0; i < 5; ++i) {
    a[i] = rng.uniform(0.5, 2.0);
    c[i] = rng.uniform(-1, 1);
    x[i] = rng.uniform(-5, 5);
  }
  auto f = [&] {
    double s = 0;
    for (std::size_t i = 0; i < 5; ++i) s += 0.5 * a[i] * (x[i] - c[i]) * (x[i] - c[i]);
    return s;
  };
  double prev = f();
  for (int step = 0; step < 100; ++step) {
    Vector g(5);
    for (std::size_t i = 0; i < 5; ++i) g[i] = a[i] * (x[i] - c[i]);
    sgd_step(x, g, 0.05);
    const double now = f();
    EXPECT_LE(now, prev);
    prev = now;
  }
}

TEST(SgdStep, ZeroLearningRateLeavesParametersBitIdentical) {
  SequenceRng rng(4);
  DenseLayer l = testing_support::random_layer(3, 3, rng);
  GradientBuffer g(l);
  for (double& v : g.weights.flat()) v = rng.uniform(-1, 1);
  const DenseLayer before = l;
  sgd_step(l, g, 0.0);
  EXPECT_EQ(l, before);
}

TEST(DenseBackward, MaskedNodePassesNoGradient) {
  SequenceRng rng(9);
  DenseLayer l = testing_support::random_layer(3, 2, rng, Activation::Identity);
  NodeMask m;
  m.keep = {0, 1};
  const Vector x{1, 2, 3};
  const LayerCache c = dense_forward_cached(l, x, m);
  EXPECT_EQ(c.output[0], 0.0);
  GradientBuffer g(l);
  const Vector up{1, 1};
  dense_backward(l, c, up, m, g);
  for (std::size_t col = 0; col < 3; ++col) EXPECT_EQ(g.weights(0, col), 0.0);
  EXPECT_EQ(g.bias[0], 0.0);
  EXPECT_NE(g.bias[1], 0.0);
}

TEST(Initialize, FanInScaledUniformRange) {
  DenseLayer l(30, 20);
  initialize(l, KeyedRng(1), 7);
  const double limit = std::sqrt(6.0 / 50.0);
  for (double w : l.weights.flat()) {
    EXPECT_GE(w, -limit);
    EXPECT_LT(w, limit);
  }
  for (double b : l.bias) EXPECT_EQ(b, 0.0);
  DenseLayer again(30, 20);
  initialize(again, KeyedRng(1), 7);
  EXPECT_EQ(l, again);
}

TEST(FiniteDiffCheck, TwoLayerToyNetWithFixedMask) {
  ModelConfig c = testing_support::toy_config(Backbone::Ogd, 2, 1);
  c.base_only = true;
  AuxDropModel model(c, 17);
  HaphazardInstance inst{1, {0.3, -0.8}, {}, 1};
  const NetworkMask mask = model.make_masks({}, 1);
  GradCheckOptions opt;
  opt.tolerance = 1e-5;
  const GradCheckReport rep = finite_diff_check(model, inst, mask, opt);
  EXPECT_GT(rep.checked, 0u);
  EXPECT_TRUE(rep.passed) << rep.max_relative_error << " in " << rep.worst_block;
}

TEST(FiniteDiffCheck, AllFrozenAuxLayerHasZeroAnalyticGradient) {
  ModelConfig c = testing_support::toy_config(Backbone::Ogd, 3, 2);
  c.declared_aux = {1, 2};
  c.aux_nodes = 4;
  c.dropout = 0.5;
  AuxDropModel model(c, 3);
  HaphazardInstance inst{1, {0.5, 0.1}, {}, 0};
  NetworkMask mask = model.make_masks({}, 1);
  mask.aux->state.assign(4, NodeDrop::Random);
  mask.aux->kept.clear();
  const auto g = model.backward(model.forward(inst.base, inst.aux, mask), inst.label, mask);
  EXPECT_TRUE(g.layers[1].all_zero());
  DenseLayer& aux = model.hidden(1);
  const double base = training_objective(model, inst.base, inst.aux, inst.label, mask);
  for (double& w : aux.weights.flat()) {
    const double saved = w;
    w = saved + 1e-3;
    EXPECT_EQ(training_objective(model, inst.base, inst.aux, inst.label, mask), base);
    w = saved;
  }
}

TEST(FiniteDiffCheck, DroppedNodeIncomingWeightsHaveZeroDerivative) {
  ModelConfig c = testing_support::toy_config(Backbone::Ogd, 3, 2);
  c.declared_aux = {1};
  c.aux_nodes = 3;
  c.dropout = 0.4;
  AuxDropModel model(c, 21);
  HaphazardInstance inst{1, {0.7, -0.2}, {{1, 0.9}}, 1};
  NetworkMask mask = model.make_masks(inst.aux, 1);
  mask.aux->state = {NodeDrop::Kept, NodeDrop::Random, NodeDrop::Kept};
  const auto g = model.backward(model.forward(inst.base, inst.aux, mask), inst.label, mask);
  DenseLayer& aux = model.hidden(1);
  for (std::size_t col = 0; col < aux.in_dim(); ++col) {
    EXPECT_EQ(g.layers[1].weights(1, col), 0.0);
    const double saved = aux.weights(1, col);
    aux.weights(1, col) = saved + 1e-3;
    const double up = training_objective(model, inst.base, inst.aux, inst.label, mask);
    aux.weights(1, col) = saved - 1e-3;
    const double down = training_objective(model, inst.base, inst.aux, inst.label, mask);
    aux.weights(1, col) = saved;
    EXPECT_EQ(up, down);
  }
}
