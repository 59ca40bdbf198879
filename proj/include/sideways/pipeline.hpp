#pragma once

#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <utility>
#include <vector>

#include "sideways/network.hpp"

// Step-indexed schedulers: blocking BP and the lock-free Sideways pipeline.
//
// Schedule geometry (verified against brute-force simulation in the tests):
//   module i (1-based) forwards the frame of origin t-i+1 at step t;
//   the loss at step t consumes h_D^{t-D+1} paired with y^t;
//   the first gradient reaches module i at step 2D-i;
//   the update cycle is 2D-1 steps long.

namespace sideways {

template <typename Scalar>
struct Episode {
  std::vector<Tensor<Scalar>> frames;  // x^1..x^K
  TaskKind task = TaskKind::kClassification;
  int label = -1;  // per-clip label, replicated over t (classification)

  int length() const { return static_cast<int>(frames.size()); }
};

struct TraceRecord {
  int step = 0;
  int module = 0;  // 1-based
  std::optional<int> fwd_origin;
  std::optional<int> bwd_origin;  // loss-frame origin of the consumed gradient
  bool masked = true;
};

struct LossEvent {
  int step = 0;
  int frame_origin = 0;
  double loss = 0;
};

struct StepTrace {
  std::vector<TraceRecord> records;  // one per module per step, append-only
  std::vector<LossEvent> losses;

  void clear() {
    records.clear();
    losses.clear();
  }

  // JSON-lines export, one record per step and module.
  void write_jsonl(std::ostream& os) const {
    for (const auto& r : records) {
      os << "{\"step\":" << r.step << ",\"module\":" << r.module << ",\"fwd_origin\":";
      if (r.fwd_origin) os << *r.fwd_origin; else os << "null";
      os << ",\"bwd_origin\":";
      if (r.bwd_origin) os << *r.bwd_origin; else os << "null";
      os << ",\"masked\":" << (r.masked ? "true" : "false") << "}\n";
    }
  }
};

// Loss attached to the top of the network: cross-entropy against the clip
// label, or MSE against the frame arriving at the same step.
// Returns nothing when no target exists at step t (autoencoding drain).
template <typename Scalar>
std::optional<std::pair<double, Tensor<Scalar>>> loss_at_step(
    const Episode<Scalar>& ep, const Tensor<Scalar>& top_out, int t) {
  if (ep.task == TaskKind::kClassification) {
    return softmax_xent(top_out, ep.label);
  }
  if (t < 1 || t > ep.length()) return std::nullopt;
  return mse(top_out, ep.frames[static_cast<std::size_t>(t - 1)]);
}

// Per-step occupancy of the forward/backward lanes plus the masked
// pseudo-gradient accumulators. Slots are double-buffered on step parity so
// that all module computations within one step are mutually independent.
template <typename Scalar>
struct PipelineState {
  struct ActSlot {
    Tensor<Scalar> value;
    int origin = 0;
  };
  struct GradSlot {
    Tensor<Scalar> value;
    int origin = 0;  // frame origin of the loss that spawned this gradient
  };

  int step = 0;  // completed computation steps
  // fwd[p][i]: activation waiting to be consumed by module i; index D unused.
  std::array<std::vector<std::optional<ActSlot>>, 2> fwd;
  // bwd[p][i]: pseudo-gradient waiting to be consumed by module i.
  std::array<std::vector<std::optional<GradSlot>>, 2> bwd;
  std::vector<ModuleGrads<Scalar>> acc;  // sum_t gamma_i^t grad_i^t
  std::vector<int> gamma;                // sum_t gamma_i^t
  StepTrace trace;
  // Module-D output of the current step, if any (autoencoding output lane).
  std::optional<ActSlot> top_output;
  // When set, each step's raw per-module pseudo-gradient is kept verbatim
  // (used by the noise analysis; off in training to avoid the copies).
  bool record_step_grads = false;
  std::vector<std::optional<ModuleGrads<Scalar>>> step_grads;

  void init(const NetworkSpec<Scalar>& net) {
    const int d = net.depth();
    for (auto& buf : fwd) buf.assign(static_cast<std::size_t>(d), std::nullopt);
    for (auto& buf : bwd) buf.assign(static_cast<std::size_t>(d), std::nullopt);
    acc.clear();
    gamma.assign(static_cast<std::size_t>(d), 0);
    step_grads.assign(static_cast<std::size_t>(d), std::nullopt);
    for (const auto& m : net.modules) acc.push_back(zeros_like_grads(m.layers));
    trace.clear();
    step = 0;
    top_output.reset();
  }
};

// Zero all slots, caches, accumulators, masks, and traces between clips.
template <typename Scalar>
void restart(PipelineState<Scalar>& state, NetworkSpec<Scalar>& net) {
  state.init(net);
  for (auto& m : net.modules) {
    m.cached_inputs.clear();
    m.cached_origin.reset();
  }
}

// One module's share of computation step t. In one step module i:
//  (a) consumes the activation emitted by module i-1 at step t-1 (module 1
//      consumes x^t while t <= K), caches it and emits h_i;
//  (b) at the top, computes the loss on the freshly produced h_D^{t-D+1}
//      against y^t (the loss itself takes no computation step);
//  (c) consumes a pending pseudo-gradient against its CURRENT cache,
//      accumulating the parameter pseudo-gradient and emitting the
//      downstream one. Modules with no pending gradient are masked.
//
// Reads only parity-(t-1) slots, writes only parity-t slots, so every
// module's work within a step is independent of the others'; the trace row
// for (t, i) must be preallocated by the driver.
template <typename Scalar>
void sideways_module_step(NetworkSpec<Scalar>& net, const Episode<Scalar>& ep,
                          PipelineState<Scalar>& state, int t, int i,
                          long spin_flops = 0);

// Busy work standing in for heavier per-module compute during benchmarks.
inline void spin_load(long flops) {
  volatile double x = 1.000000001;
  for (long k = 0; k < flops; ++k) x = x * 1.000000001 + 1e-12;
}

template <typename Scalar>
void sideways_module_step(NetworkSpec<Scalar>& net, const Episode<Scalar>& ep,
                          PipelineState<Scalar>& state, int t, int i,
                          long spin_flops) {
  const int d = net.depth();
  const int k = ep.length();
  const int p = (t - 1) % 2;  // read parity
  const int q = t % 2;        // write parity
  auto& mod = net.modules[static_cast<std::size_t>(i)];

  // (a) forward lane
  std::optional<typename PipelineState<Scalar>::ActSlot> in;
  if (i == 0) {
    if (t <= k) in = {ep.frames[static_cast<std::size_t>(t - 1)], t};
  } else {
    in = state.fwd[p][static_cast<std::size_t>(i)];
  }
  std::optional<typename PipelineState<Scalar>::ActSlot> out;
  if (in) {
    out = {module_forward(mod, in->value, in->origin), in->origin};
    if (spin_flops > 0) spin_load(spin_flops);
  }
  if (i + 1 < d) {
    state.fwd[q][static_cast<std::size_t>(i + 1)] = out;
  } else {
    state.top_output = out;
  }

  // (b) loss at the top, (c) backward lane
  std::optional<typename PipelineState<Scalar>::GradSlot> up;
  if (i == d - 1) {
    if (out) {
      if (auto lg = loss_at_step(ep, out->value, t)) {
        up = {std::move(lg->second), out->origin};
        state.trace.losses.push_back({t, out->origin, lg->first});
      }
    }
  } else {
    up = state.bwd[p][static_cast<std::size_t>(i)];
  }

  if (up) {
    auto [pg, gi] = module_backward(mod, up->value, i);
    add_grads(state.acc[static_cast<std::size_t>(i)], pg);
    state.gamma[static_cast<std::size_t>(i)] += 1;
    if (state.record_step_grads) state.step_grads[static_cast<std::size_t>(i)] = pg;
    if (spin_flops > 0) spin_load(spin_flops);
    if (i > 0) {
      state.bwd[q][static_cast<std::size_t>(i - 1)] =
          typename PipelineState<Scalar>::GradSlot{std::move(gi), up->origin};
    }
  } else {
    if (i > 0) state.bwd[q][static_cast<std::size_t>(i - 1)] = std::nullopt;
    if (state.record_step_grads) state.step_grads[static_cast<std::size_t>(i)].reset();
  }

  auto& rec =
      state.trace.records[static_cast<std::size_t>((t - 1) * d + i)];
  rec.step = t;
  rec.module = i + 1;
  if (in) rec.fwd_origin = in->origin;
  if (up) rec.bwd_origin = up->origin;
  rec.masked = !up.has_value();
}

// One full computation step of the Sideways pipeline (sequential driver).
template <typename Scalar>
void sideways_step(NetworkSpec<Scalar>& net, const Episode<Scalar>& ep,
                   PipelineState<Scalar>& state, long spin_flops = 0) {
  const int d = net.depth();
  const int t = state.step + 1;
  state.trace.records.resize(static_cast<std::size_t>(t) * d);
  for (int i = 0; i < d; ++i) sideways_module_step(net, ep, state, t, i, spin_flops);
  state.step = t;
}

// Steps needed so every frame's gradient can land in every module:
// K frames plus a 2(D-1)-step drain.
template <typename Scalar>
int episode_step_count(const NetworkSpec<Scalar>& net, const Episode<Scalar>& ep) {
  return ep.length() + 2 * (net.depth() - 1);
}

inline int cycle_length(int depth) { return 2 * depth - 1; }

// Masked Eq.-5 averages; a module that never received a gradient yields an
// explicit no-update marker rather than zeros.
template <typename Scalar>
std::vector<std::optional<ModuleGrads<Scalar>>> finish_episode(
    const PipelineState<Scalar>& state) {
  std::vector<std::optional<ModuleGrads<Scalar>>> out;
  for (std::size_t i = 0; i < state.acc.size(); ++i) {
    if (state.gamma[i] == 0) {
      out.push_back(std::nullopt);
      continue;
    }
    ModuleGrads<Scalar> g = state.acc[i];
    scale_grads(g, Scalar(1) / Scalar(state.gamma[i]));
    out.push_back(std::move(g));
  }
  return out;
}

// Hands out the gradients accumulated since the last call and clears the
// accumulators; with one call per computation step this yields the L=1
// per-loss-event gradients of the autoencoding regime.
template <typename Scalar>
std::vector<std::optional<ModuleGrads<Scalar>>> consume_step_grads(
    PipelineState<Scalar>& state) {
  std::vector<std::optional<ModuleGrads<Scalar>>> out;
  for (std::size_t i = 0; i < state.acc.size(); ++i) {
    if (state.gamma[i] == 0) {
      out.push_back(std::nullopt);
      continue;
    }
    ModuleGrads<Scalar> g = state.acc[i];
    scale_grads(g, Scalar(1) / Scalar(state.gamma[i]));
    out.push_back(std::move(g));
    for (auto& layer : state.acc[i])
      for (auto& p : layer) p.vec().setZero();
    state.gamma[i] = 0;
  }
  return out;
}

// Convenience driver: restart, run the clip plus drain, return averages.
template <typename Scalar>
std::vector<std::optional<ModuleGrads<Scalar>>> run_sideways_episode(
    NetworkSpec<Scalar>& net, const Episode<Scalar>& ep,
    PipelineState<Scalar>& state) {
  restart(state, net);
  const int steps = episode_step_count(net, ep);
  for (int t = 0; t < steps; ++t) sideways_step(net, ep, state);
  return finish_episode(state);
}

// ---------------------------------------------------------------------------
// Blocking BP
// ---------------------------------------------------------------------------

// The per-frame BP update cycle as a list of single-module work items; used
// by both the sequential driver and the depth-parallel executor so their
// operation order is identical. Steps 1..D are forwards (the loss and the
// top module's backward ride on step D, the loss being free); steps
// D+1..2D-1 are backwards.
enum class BpWorkKind { kForward, kBackwardTop, kBackward };

struct BpWorkItem {
  int step = 0;    // step within the frame's cycle, 1-based
  int module = 0;  // 0-based
  BpWorkKind kind = BpWorkKind::kForward;
};

inline std::vector<BpWorkItem> bp_cycle_items(int depth) {
  std::vector<BpWorkItem> items;
  for (int s = 1; s <= depth; ++s) items.push_back({s, s - 1, BpWorkKind::kForward});
  items.push_back({depth, depth - 1, BpWorkKind::kBackwardTop});
  for (int s = depth + 1; s <= 2 * depth - 1; ++s) {
    items.push_back({s, 2 * depth - 1 - s, BpWorkKind::kBackward});
  }
  return items;
}

// Shared hand-off slots for one BP cycle; only one item runs per step, so a
// plain pair of tensors suffices.
template <typename Scalar>
struct BpCycleState {
  Tensor<Scalar> activation;
  Tensor<Scalar> gradient;
  double frame_loss = 0;
};

template <typename Scalar>
void bp_apply_item(NetworkSpec<Scalar>& net, const Episode<Scalar>& ep, int frame,
                   const BpWorkItem& item, BpCycleState<Scalar>& cyc,
                   std::vector<ModuleGrads<Scalar>>& acc, long spin_flops = 0) {
  auto& mod = net.modules[static_cast<std::size_t>(item.module)];
  switch (item.kind) {
    case BpWorkKind::kForward: {
      const Tensor<Scalar>& in =
          item.module == 0 ? ep.frames[static_cast<std::size_t>(frame - 1)]
                           : cyc.activation;
      cyc.activation = module_forward(mod, in, frame);
      if (spin_flops > 0) spin_load(spin_flops);
      break;
    }
    case BpWorkKind::kBackwardTop: {
      auto lg = loss_at_step(ep, cyc.activation, frame);
      cyc.frame_loss = lg->first;
      auto [pg, gi] = module_backward(mod, lg->second, item.module);
      add_grads(acc[static_cast<std::size_t>(item.module)], pg);
      cyc.gradient = std::move(gi);
      if (spin_flops > 0) spin_load(spin_flops);
      break;
    }
    case BpWorkKind::kBackward: {
      auto [pg, gi] = module_backward(mod, cyc.gradient, item.module);
      add_grads(acc[static_cast<std::size_t>(item.module)], pg);
      cyc.gradient = std::move(gi);
      if (spin_flops > 0) spin_load(spin_flops);
      break;
    }
  }
}

template <typename Scalar>
struct BpEpisodeResult {
  std::vector<ModuleGrads<Scalar>> grads;  // averaged over frames
  StepTrace trace;
  double mean_loss = 0;
};

// Classical per-frame forward-then-backward; computations stay blocked for
// the whole 2D-1 step cycle of each frame, and the trace says so.
template <typename Scalar>
BpEpisodeResult<Scalar> bp_episode(NetworkSpec<Scalar>& net,
                                   const Episode<Scalar>& ep) {
  const int d = net.depth();
  const int k = ep.length();
  BpEpisodeResult<Scalar> res;
  for (const auto& m : net.modules) res.grads.push_back(zeros_like_grads(m.layers));
  const auto items = bp_cycle_items(d);
  for (int frame = 1; frame <= k; ++frame) {
    const int base = (frame - 1) * cycle_length(d);
    res.trace.records.resize(static_cast<std::size_t>(base + cycle_length(d)) * d);
    for (int s = 1; s <= cycle_length(d); ++s) {
      for (int i = 0; i < d; ++i) {
        auto& rec = res.trace.records[static_cast<std::size_t>(base + s - 1) * d + i];
        rec.step = base + s;
        rec.module = i + 1;
      }
    }
    BpCycleState<Scalar> cyc;
    for (const auto& item : items) {
      bp_apply_item(net, ep, frame, item, cyc, res.grads);
      auto& rec = res.trace.records[static_cast<std::size_t>(base + item.step - 1) * d +
                                    item.module];
      if (item.kind == BpWorkKind::kForward) {
        rec.fwd_origin = frame;
      } else {
        rec.bwd_origin = frame;
        rec.masked = false;
      }
      if (item.kind == BpWorkKind::kBackwardTop) {
        res.trace.losses.push_back({base + item.step, frame, cyc.frame_loss});
      }
    }
    res.mean_loss += cyc.frame_loss;
  }
  for (auto& g : res.grads) scale_grads(g, Scalar(1) / Scalar(k));
  res.mean_loss /= k;
  return res;
}

// ---------------------------------------------------------------------------
// Real-time autoencoding
// ---------------------------------------------------------------------------

template <typename Scalar>
struct RealtimeResult {
  std::vector<Tensor<Scalar>> outputs;  // one per input step
  std::set<int> dropped;                // 1-based frame indices never processed
};

// Accepted steps under BP blocking: 1, 2D, 4D-1, ... (period 2D-1).
inline bool bp_accepts_frame(int t, int depth) {
  return (t - 1) % cycle_length(depth) == 0;
}

// Blocking model at one frame per computation step: after accepting a frame
// the network is busy for 2(D-1) further steps and arriving frames are
// dropped; the reconstruction of an accepted frame appears D-1 steps after
// acceptance and the last produced output is copied until the next one.
template <typename Scalar>
RealtimeResult<Scalar> realtime_bp_autoencode(NetworkSpec<Scalar>& net,
                                              const std::vector<Tensor<Scalar>>& stream) {
  const int d = net.depth();
  const int k = static_cast<int>(stream.size());
  RealtimeResult<Scalar> res;
  Tensor<Scalar> last;
  std::map<int, Tensor<Scalar>> pending;  // step at which a reconstruction lands
  for (int t = 1; t <= k; ++t) {
    if (bp_accepts_frame(t, d)) {
      Tensor<Scalar> h = stream[static_cast<std::size_t>(t - 1)];
      for (auto& m : net.modules) h = module_forward(m, h, t);
      pending[t + d - 1] = std::move(h);
    } else {
      res.dropped.insert(t);
    }
    if (auto it = pending.find(t); it != pending.end()) {
      last = std::move(it->second);
      pending.erase(it);
    }
    res.outputs.push_back(last.empty()
                              ? Tensor<Scalar>(stream[0].shape())
                              : last);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Pseudo-gradient noise
// ---------------------------------------------------------------------------

struct NoiseReport {
  // mean over steps of ||pseudo - exact|| / ||exact||, per module (1-based-1)
  std::vector<double> mean_relative_noise;
  std::vector<int> samples;
};

// Compares every per-step parameter pseudo-gradient with the exact BP
// gradient of the loss frame it is paired with.
template <typename Scalar>
NoiseReport measure_gradient_noise(NetworkSpec<Scalar>& net,
                                   const Episode<Scalar>& ep) {
  const int d = net.depth();
  NoiseReport report;
  report.mean_relative_noise.assign(static_cast<std::size_t>(d), 0.0);
  report.samples.assign(static_cast<std::size_t>(d), 0);

  // Exact per-module gradients of the loss the pipeline actually paired:
  // input frame o, target y^s with s = o + D - 1 (the step the loss fired),
  // computed on a scratch copy of the net.
  std::map<int, std::vector<ModuleGrads<Scalar>>> exact_cache;
  auto exact_for_origin = [&](int origin) -> const std::vector<ModuleGrads<Scalar>>& {
    auto it = exact_cache.find(origin);
    if (it != exact_cache.end()) return it->second;
    NetworkSpec<Scalar> scratch = net;
    Tensor<Scalar> h = ep.frames[static_cast<std::size_t>(origin - 1)];
    for (auto& m : scratch.modules) h = module_forward(m, h, origin);
    const int loss_step = origin + d - 1;
    auto lg = loss_at_step(ep, h, loss_step);
    std::vector<ModuleGrads<Scalar>> grads;
    Tensor<Scalar> g = lg->second;
    grads.resize(static_cast<std::size_t>(d));
    for (int j = d - 1; j >= 0; --j) {
      auto [pg, gi] = module_backward(scratch.modules[static_cast<std::size_t>(j)], g, j);
      grads[static_cast<std::size_t>(j)] = std::move(pg);
      g = std::move(gi);
    }
    return exact_cache.emplace(origin, std::move(grads)).first->second;
  };

  PipelineState<Scalar> state;
  restart(state, net);
  state.record_step_grads = true;
  const int steps = episode_step_count(net, ep);
  for (int t = 1; t <= steps; ++t) {
    sideways_step(net, ep, state);
    for (int i = 0; i < d; ++i) {
      const auto& rec = state.trace.records[static_cast<std::size_t>(t - 1) * d + i];
      if (rec.masked) continue;
      const int origin = *rec.bwd_origin;
      const auto& exact = exact_for_origin(origin)[static_cast<std::size_t>(i)];
      ModuleGrads<Scalar> eps = *state.step_grads[static_cast<std::size_t>(i)];
      add_grads(eps, exact, Scalar(-1));
      const double exact_norm = std::sqrt(grads_sq_norm(exact));
      if (exact_norm == 0) continue;
      report.mean_relative_noise[static_cast<std::size_t>(i)] +=
          std::sqrt(grads_sq_norm(eps)) / exact_norm;
      report.samples[static_cast<std::size_t>(i)] += 1;
    }
  }
  for (int i = 0; i < d; ++i) {
    if (report.samples[static_cast<std::size_t>(i)] > 0) {
      report.mean_relative_noise[static_cast<std::size_t>(i)] /=
          report.samples[static_cast<std::size_t>(i)];
    }
  }
  return report;
}

}  // namespace sideways
