#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sideways/network.hpp"

namespace sideways {

enum class OptRule { kSgd, kMomentum, kAdam };

inline const char* opt_rule_name(OptRule r) {
  switch (r) {
    case OptRule::kSgd: return "sgd";
    case OptRule::kMomentum: return "momentum";
    case OptRule::kAdam: return "adam";
  }
  return "?";
}

// Piecewise schedule: per-iteration linear warm-up to base_lr over the first
// warmup_epochs, then a division by decay_factor at each decay epoch.
struct LrSchedule {
  double base_lr = 1e-4;
  int warmup_epochs = 5;
  std::vector<int> decay_epochs{100, 200};
  double decay_factor = 10.0;
  int iters_per_epoch = 1;
};

inline double lr_at(const LrSchedule& s, int epoch, int iteration) {
  if (epoch < s.warmup_epochs) {
    const double total_warmup_iters =
        double(s.warmup_epochs) * double(s.iters_per_epoch);
    const double done = double(epoch) * double(s.iters_per_epoch) + double(iteration);
    return s.base_lr * (done / total_warmup_iters);
  }
  double lr = s.base_lr;
  for (int de : s.decay_epochs) {
    if (epoch >= de) lr /= s.decay_factor;
  }
  return lr;
}

// Pinned "default hyperparameters": momentum 0.9, Adam (0.9, 0.999, 1e-8).
// Gradients are clipped by value to [-clip_value, clip_value] before the
// rule; weight decay is decoupled from the loss and applied as a separate
// theta -= lr * lambda * theta term. No-update markers leave the module's
// parameters completely untouched.
template <typename Scalar>
class Optimizer {
 public:
  Optimizer(OptRule rule, double clip_value = 1.0, double weight_decay = 0.0)
      : rule_(rule), clip_value_(clip_value), weight_decay_(weight_decay) {}

  OptRule rule() const { return rule_; }
  double clip_value() const { return clip_value_; }
  double weight_decay() const { return weight_decay_; }

  void apply_update(NetworkSpec<Scalar>& net,
                    const std::vector<std::optional<ModuleGrads<Scalar>>>& grads,
                    double lr) {
    ensure_state(net);
    for (int i = 0; i < net.depth(); ++i) {
      if (!grads[static_cast<std::size_t>(i)].has_value()) continue;
      update_module(net, i, *grads[static_cast<std::size_t>(i)], lr);
    }
  }

  // Per-module update used by the autoencoding L=1 regime, where each loss
  // event updates just the module it reached.
  void update_module(NetworkSpec<Scalar>& net, int module_index,
                     const ModuleGrads<Scalar>& g, double lr) {
    ensure_state(net);
    auto& mod = net.modules[static_cast<std::size_t>(module_index)];
    auto& st = state_[static_cast<std::size_t>(module_index)];
    for (std::size_t l = 0; l < mod.layers.size(); ++l) {
      for (std::size_t p = 0; p < mod.layers[l].params.size(); ++p) {
        Tensor<Scalar>& theta = mod.layers[l].params[p];
        const Tensor<Scalar>& grad = g[l][p];
        if (!grad.all_finite()) {
          throw NonFiniteError("non-finite gradient at module " +
                               std::to_string(module_index + 1) + " layer " +
                               layer_kind_name(mod.layers[l].kind));
        }
        auto& ps = st[l][p];
        ps.steps += 1;
        for (std::int64_t e = 0; e < theta.size(); ++e) {
          double gd = std::clamp(double(grad[e]), -clip_value_, clip_value_);
          double step;
          switch (rule_) {
            case OptRule::kSgd:
              step = gd;
              break;
            case OptRule::kMomentum:
              ps.m[e] = kMomentumBeta * ps.m[e] + gd;
              step = ps.m[e];
              break;
            case OptRule::kAdam: {
              ps.m[e] = kAdamBeta1 * ps.m[e] + (1 - kAdamBeta1) * gd;
              ps.v[e] = kAdamBeta2 * ps.v[e] + (1 - kAdamBeta2) * gd * gd;
              const double mhat = ps.m[e] / (1 - std::pow(kAdamBeta1, ps.steps));
              const double vhat = ps.v[e] / (1 - std::pow(kAdamBeta2, ps.steps));
              step = mhat / (std::sqrt(vhat) + kAdamEps);
              break;
            }
          }
          double value = double(theta[e]) - lr * step;
          if (weight_decay_ != 0) value -= lr * weight_decay_ * double(theta[e]);
          theta[e] = static_cast<Scalar>(value);
        }
      }
    }
  }

  static constexpr double kMomentumBeta = 0.9;
  static constexpr double kAdamBeta1 = 0.9;
  static constexpr double kAdamBeta2 = 0.999;
  static constexpr double kAdamEps = 1e-8;

 private:
  struct ParamState {
    std::vector<double> m, v;
    long steps = 0;
  };

  void ensure_state(const NetworkSpec<Scalar>& net) {
    if (!state_.empty()) return;
    for (const auto& mod : net.modules) {
      std::vector<std::vector<ParamState>> mstate(mod.layers.size());
      for (std::size_t l = 0; l < mod.layers.size(); ++l) {
        for (const auto& p : mod.layers[l].params) {
          ParamState ps;
          ps.m.assign(static_cast<std::size_t>(p.size()), 0.0);
          ps.v.assign(static_cast<std::size_t>(p.size()), 0.0);
          mstate[l].push_back(std::move(ps));
        }
      }
      state_.push_back(std::move(mstate));
    }
  }

  OptRule rule_;
  double clip_value_;
  double weight_decay_;
  std::vector<std::vector<std::vector<ParamState>>> state_;
};

}  // namespace sideways
