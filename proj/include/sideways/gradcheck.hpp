#pragma once

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "sideways/pipeline.hpp"

// Verification oracles: central finite differences for every VJP, and a
// literal per-step transcription of the Sideways recursion that recomputes
// every Jacobian product from prefix activations, holding no pipeline state.
// These stay independent of the pipelined implementation they check.

namespace sideways {

// Central finite differences of a scalar function w.r.t. one tensor.
template <typename Scalar, typename F>
Tensor<Scalar> finite_diff(Tensor<Scalar>& x, F&& f, double step = 1e-5) {
  Tensor<Scalar> grad(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const Scalar saved = x[i];
    x[i] = saved + static_cast<Scalar>(step);
    const double up = f();
    x[i] = saved - static_cast<Scalar>(step);
    const double down = f();
    x[i] = saved;
    grad[i] = static_cast<Scalar>((up - down) / (2 * step));
  }
  return grad;
}

template <typename Scalar>
double max_rel_err(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  double worst = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double diff = std::abs(double(a[i]) - double(b[i]));
    const double scale = std::max({std::abs(double(a[i])), std::abs(double(b[i])), 1e-8});
    worst = std::max(worst, diff / scale);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Unrolled Sideways oracle
// ---------------------------------------------------------------------------

// Per-module masked averages computed by literally replaying the recursive
// pseudo-gradient rules step by step: the gradient labelled t-1 at module i
// pairs with the Jacobian at the activation of origin t-i+1 (clamped to the
// last frame once the clip is exhausted, matching the single-slot cache).
template <typename Scalar>
std::vector<std::optional<ModuleGrads<Scalar>>> unrolled_sideways_grads(
    const NetworkSpec<Scalar>& net, const Episode<Scalar>& ep) {
  const int d = net.depth();
  const int k = ep.length();

  // prefix activations act[o][i] = h_i^o, with act[o][0] = x^o
  std::vector<std::vector<Tensor<Scalar>>> act(static_cast<std::size_t>(k + 1));
  for (int o = 1; o <= k; ++o) {
    NetworkSpec<Scalar> scratch = net;
    act[o].push_back(ep.frames[static_cast<std::size_t>(o - 1)]);
    Tensor<Scalar> h = act[o][0];
    for (int i = 0; i < d; ++i) {
      h = module_forward(scratch.modules[static_cast<std::size_t>(i)], h, o);
      act[o].push_back(h);
    }
  }

  // vjp of module i (0-based) at the activation of origin `o`
  auto module_vjp_at = [&](int i, int o, const Tensor<Scalar>& upstream) {
    Module<Scalar> scratch = net.modules[static_cast<std::size_t>(i)];
    module_forward(scratch, act[o][static_cast<std::size_t>(i)], o);
    return module_backward(scratch, upstream, i);
  };

  std::vector<ModuleGrads<Scalar>> accum;
  std::vector<int> count(static_cast<std::size_t>(d), 0);
  for (const auto& m : net.modules) accum.push_back(zeros_like_grads(m.layers));

  // gh[i] = pseudo-gradient w.r.t. h_i produced at the previous step
  std::vector<std::optional<Tensor<Scalar>>> gh_prev(static_cast<std::size_t>(d),
                                                     std::nullopt);
  const int total_steps = k + 2 * (d - 1);
  for (int t = 1; t <= total_steps; ++t) {
    std::vector<std::optional<Tensor<Scalar>>> gh_next(static_cast<std::size_t>(d),
                                                       std::nullopt);
    for (int i = d; i >= 1; --i) {  // 1-based module index
      std::optional<Tensor<Scalar>> upstream;
      if (i == d) {
        const int o = t - d + 1;
        if (o >= 1 && o <= k) {
          if (auto lg = loss_at_step(ep, act[o][static_cast<std::size_t>(d)], t)) {
            upstream = lg->second;
          }
        }
      } else {
        upstream = gh_prev[static_cast<std::size_t>(i)];
      }
      if (!upstream) continue;
      const int o = std::min(t - i + 1, k);
      auto [pg, gi] = module_vjp_at(i - 1, o, *upstream);
      add_grads(accum[static_cast<std::size_t>(i - 1)], pg);
      count[static_cast<std::size_t>(i - 1)] += 1;
      if (i > 1) gh_next[static_cast<std::size_t>(i - 1)] = std::move(gi);
    }
    gh_prev = std::move(gh_next);
  }

  std::vector<std::optional<ModuleGrads<Scalar>>> out;
  for (int i = 0; i < d; ++i) {
    if (count[static_cast<std::size_t>(i)] == 0) {
      out.push_back(std::nullopt);
      continue;
    }
    scale_grads(accum[static_cast<std::size_t>(i)],
                Scalar(1) / Scalar(count[static_cast<std::size_t>(i)]));
    out.push_back(std::move(accum[static_cast<std::size_t>(i)]));
  }
  return out;
}

template <typename Scalar>
double max_grads_rel_err(
    const std::vector<std::optional<ModuleGrads<Scalar>>>& a,
    const std::vector<std::optional<ModuleGrads<Scalar>>>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].has_value() != b[i].has_value()) return 1e30;
    if (!a[i]) continue;
    for (std::size_t l = 0; l < a[i]->size(); ++l) {
      for (std::size_t p = 0; p < (*a[i])[l].size(); ++p) {
        worst = std::max(worst, max_rel_err((*a[i])[l][p], (*b[i])[l][p]));
      }
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Gradient-check suite (the substance behind `gradcheck` on the CLI)
// ---------------------------------------------------------------------------

struct GradcheckOptions {
  double per_layer_tol = 1e-6;
  double end_to_end_tol = 1e-5;
  double unrolled_tol = 1e-12;
  // Test fixture: flip the sign of this module's backward output (1-based, 0
  // disables) to prove the checker catches a broken VJP and names the layer.
  int inject_fault_module = 0;
};

struct GradcheckReport {
  bool passed = true;
  std::vector<std::string> failures;
  std::vector<std::string> checks;

  void record(bool ok, const std::string& name) {
    checks.push_back((ok ? "ok   " : "FAIL ") + name);
    if (!ok) {
      passed = false;
      failures.push_back(name);
    }
  }
};

// Runs the full oracle suite on a tiny double-precision net.
inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
  using S = double;
  GradcheckReport report;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);

  auto random_fill = [&](Tensor<S>& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  };

  NetworkSpec<S> net = build_simple_cnn<S>({3, 4}, 3, {6, 6, 2}, 11);
  Episode<S> ep;
  ep.task = TaskKind::kClassification;
  ep.label = 1;
  for (int t = 0; t < 4; ++t) {
    Tensor<S> f({6, 6, 2});
    random_fill(f);
    ep.frames.push_back(std::move(f));
  }

  // Per-layer VJPs against finite differences of sum(forward * upstream).
  for (int mi = 0; mi < net.depth(); ++mi) {
    auto& mod = net.modules[static_cast<std::size_t>(mi)];
    // pick a representative input for this module
    NetworkSpec<S> scratch = net;
    Tensor<S> h = ep.frames[0];
    for (int j = 0; j < mi; ++j) {
      h = module_forward(scratch.modules[static_cast<std::size_t>(j)], h, 1);
    }
    for (std::size_t li = 0; li < mod.layers.size(); ++li) {
      Layer<S>& layer = mod.layers[li];
      Tensor<S> input = h;
      for (std::size_t j = 0; j < li; ++j) input = layer_forward(mod.layers[j], input);
      Tensor<S> out = layer_forward(layer, input);
      Tensor<S> upstream(out.shape());
      random_fill(upstream);
      auto [pg, gi] = layer_vjp(layer, input, upstream);
      if (opt.inject_fault_module == mi + 1) {
        for (auto& p : pg) p.vec() *= S(-1);
        gi.vec() *= S(-1);
      }
      auto objective = [&]() {
        return double(layer_forward(layer, input).vec().dot(upstream.vec()));
      };
      bool ok = true;
      for (std::size_t pi = 0; pi < layer.params.size(); ++pi) {
        Tensor<S> fd = finite_diff(layer.params[pi], objective);
        ok = ok && max_rel_err(fd, pg[pi]) <= opt.per_layer_tol;
      }
      Tensor<S> fd_in = finite_diff(input, objective);
      ok = ok && max_rel_err(fd_in, gi) <= opt.per_layer_tol;
      std::ostringstream name;
      name << "module " << (mi + 1) << " " << layer_kind_name(layer.kind)
           << " vjp vs finite differences";
      report.record(ok, name.str());
    }
  }

  // End-to-end bp_episode gradient against finite differences of the loss.
  {
    auto mean_loss = [&]() {
      NetworkSpec<S> scratch = net;
      double total = 0;
      for (int t = 1; t <= ep.length(); ++t) {
        Tensor<S> h = ep.frames[static_cast<std::size_t>(t - 1)];
        for (auto& m : scratch.modules) h = module_forward(m, h, t);
        total += loss_at_step(ep, h, t)->first;
      }
      return total / ep.length();
    };
    auto bp = bp_episode(net, ep);
    bool ok = true;
    for (int mi = 0; mi < net.depth(); ++mi) {
      auto& mod = net.modules[static_cast<std::size_t>(mi)];
      for (std::size_t li = 0; li < mod.layers.size(); ++li) {
        for (std::size_t pi = 0; pi < mod.layers[li].params.size(); ++pi) {
          Tensor<S> fd = finite_diff(mod.layers[li].params[pi], mean_loss);
          Tensor<S> got = bp.grads[static_cast<std::size_t>(mi)][li][pi];
          if (opt.inject_fault_module == mi + 1) got.vec() *= S(-1);
          ok = ok && max_rel_err(fd, got) <= opt.end_to_end_tol;
        }
      }
    }
    report.record(ok, "bp_episode end-to-end gradient vs finite differences");
  }

  // Pipelined Sideways vs the unrolled transcription, D in 1..3, K in 1..6.
  {
    auto make_tiny = [](int depth, std::uint64_t seed) {
      if (depth == 1) {
        // pool + linear head as the sole module
        NetworkSpec<S> n;
        n.task = TaskKind::kClassification;
        n.num_classes = 2;
        n.input_shape = {4, 4, 1};
        std::mt19937_64 gen(seed);
        Module<S> head;
        Layer<S> pool;
        pool.kind = LayerKind::kPool;
        head.layers.push_back(pool);
        head.layers.push_back(detail::make_linear<S>(1, 2, true, gen));
        n.modules.push_back(std::move(head));
        return n;
      }
      std::vector<int> chans;
      for (int i = 0; i + 1 < depth; ++i) chans.push_back(2 + i);
      return build_simple_cnn<S>(chans, 2, {4, 4, 1}, seed);
    };
    bool ok = true;
    for (int depth = 1; depth <= 3 && ok; ++depth) {
      for (int k = 1; k <= 6 && ok; ++k) {
        NetworkSpec<S> tiny = make_tiny(depth, 100 + depth);
        Episode<S> e;
        e.task = TaskKind::kClassification;
        e.label = 0;
        for (int t = 0; t < k; ++t) {
          Tensor<S> f({4, 4, 1});
          random_fill(f);
          e.frames.push_back(std::move(f));
        }
        PipelineState<S> state;
        NetworkSpec<S> run_net = tiny;
        auto got = run_sideways_episode(run_net, e, state);
        auto want = unrolled_sideways_grads(tiny, e);
        if (opt.inject_fault_module > 0 && opt.inject_fault_module <= tiny.depth()) {
          auto& g = got[static_cast<std::size_t>(opt.inject_fault_module - 1)];
          if (g) scale_grads(*g, S(-1));
        }
        ok = ok && max_grads_rel_err(got, want) <= opt.unrolled_tol;
      }
    }
    report.record(ok, "pipelined sideways vs unrolled recursion (D<=3, K<=6)");
  }

  return report;
}

}  // namespace sideways
