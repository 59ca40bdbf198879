#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "sideways/optimizer.hpp"

using namespace sideways;

namespace {

// One module with a single 1x2 linear weight so updates are easy to follow.
NetworkSpec<double> scalar_net(double w0, double w1) {
  NetworkSpec<double> net;
  Module<double> m;
  std::mt19937_64 rng(0);
  auto layer = detail::make_linear<double>(2, 1, false, rng);
  layer.params[0].at(0, 0) = w0;
  layer.params[0].at(0, 1) = w1;
  m.layers.push_back(std::move(layer));
  net.modules.push_back(std::move(m));
  net.task = TaskKind::kClassification;
  net.num_classes = 1;
  return net;
}

std::vector<std::optional<ModuleGrads<double>>> grad_of(double g0, double g1) {
  ModuleGrads<double> g;
  Tensor<double> t({1, 2});
  t.at(0, 0) = g0;
  t.at(0, 1) = g1;
  g.push_back({std::move(t)});
  return {std::optional<ModuleGrads<double>>(std::move(g))};
}

}  // namespace

TEST_CASE("sgd with clip-by-value at 1.0 before the rule") {
  auto net = scalar_net(1.0, -1.0);
  Optimizer<double> opt(OptRule::kSgd, 1.0, 0.0);
  opt.apply_update(net, grad_of(5.0, -0.25), 0.1);
  // 5.0 clips to 1.0; -0.25 passes through.
  CHECK(net.modules[0].layers[0].params[0].at(0, 0) == doctest::Approx(0.9));
  CHECK(net.modules[0].layers[0].params[0].at(0, 1) == doctest::Approx(-0.975));
}

TEST_CASE("momentum accumulates with beta 0.9") {
  auto net = scalar_net(0.0, 0.0);
  Optimizer<double> opt(OptRule::kMomentum, 100.0, 0.0);
  opt.apply_update(net, grad_of(1.0, 0.0), 1.0);  // v = 1, theta = -1
  opt.apply_update(net, grad_of(1.0, 0.0), 1.0);  // v = 1.9, theta = -2.9
  CHECK(net.modules[0].layers[0].params[0].at(0, 0) == doctest::Approx(-2.9));
}

TEST_CASE("adam first step: hand-computed bias-corrected update") {
  auto net = scalar_net(0.5, 0.5);
  Optimizer<double> opt(OptRule::kAdam, 100.0, 0.0);
  const double g = 0.3, lr = 0.01;
  opt.apply_update(net, grad_of(g, g), lr);
  // step 1: mhat = g, vhat = g^2, update = lr * g / (|g| + eps)
  const double want = 0.5 - lr * g / (std::sqrt(g * g) + Optimizer<double>::kAdamEps);
  CHECK(net.modules[0].layers[0].params[0].at(0, 0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("decoupled weight decay shrinks parameters geometrically") {
  auto net = scalar_net(2.0, -2.0);
  const double lr = 0.1, lambda = 0.5;
  Optimizer<double> opt(OptRule::kSgd, 1.0, lambda);
  const int n = 4;
  for (int i = 0; i < n; ++i) opt.apply_update(net, grad_of(0.0, 0.0), lr);
  // zero gradient: theta_n = theta_0 * (1 - lr*lambda)^n, independent of rule
  const double want = 2.0 * std::pow(1 - lr * lambda, n);
  CHECK(net.modules[0].layers[0].params[0].at(0, 0) == doctest::Approx(want).epsilon(1e-12));
  CHECK(net.modules[0].layers[0].params[0].at(0, 1) == doctest::Approx(-want).epsilon(1e-12));
}

TEST_CASE("no-update marker leaves parameters and optimizer state untouched") {
  auto net = scalar_net(1.0, 1.0);
  Optimizer<double> opt(OptRule::kAdam, 1.0, 0.1);
  std::vector<std::optional<ModuleGrads<double>>> none{std::nullopt};
  opt.apply_update(net, none, 0.5);
  CHECK(net.modules[0].layers[0].params[0].at(0, 0) == 1.0);  // no decay either
  // A real update afterwards is still Adam step 1 (state untouched above).
  opt.apply_update(net, grad_of(0.3, 0.0), 0.01);
  const double want =
      1.0 - 0.01 * 0.3 / (0.3 + Optimizer<double>::kAdamEps) - 0.01 * 0.1 * 1.0;
  CHECK(net.modules[0].layers[0].params[0].at(0, 0) == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("non-finite gradients raise with module and layer named") {
  auto net = scalar_net(1.0, 1.0);
  Optimizer<double> opt(OptRule::kSgd);
  auto g = grad_of(std::numeric_limits<double>::quiet_NaN(), 0.0);
  CHECK_THROWS_AS(opt.apply_update(net, g, 0.1), NonFiniteError);
  try {
    opt.apply_update(net, g, 0.1);
  } catch (const NonFiniteError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("module 1") != std::string::npos);
    CHECK(msg.find("linear") != std::string::npos);
  }
}

TEST_CASE("lr schedule: linear per-iteration warmup, then step decays") {
  LrSchedule s;
  s.base_lr = 1e-3;
  s.warmup_epochs = 5;
  s.decay_epochs = {100, 200};
  s.decay_factor = 10.0;
  s.iters_per_epoch = 10;
  CHECK(lr_at(s, 0, 0) == 0.0);
  CHECK(lr_at(s, 0, 1) == doctest::Approx(1e-3 / 50).epsilon(1e-12));
  CHECK(lr_at(s, 2, 5) == doctest::Approx(1e-3 * 25.0 / 50.0).epsilon(1e-12));
  CHECK(lr_at(s, 5, 0) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(s, 99, 3) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(s, 100, 0) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at(s, 200, 7) == doctest::Approx(1e-5).epsilon(1e-12));
}
