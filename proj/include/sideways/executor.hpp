#pragma once

#include <atomic>
#include <barrier>
#include <chrono>
#include <exception>
#include <mutex>
#include <ostream>
#include <thread>
#include <vector>

#include "sideways/pipeline.hpp"

// Two interchangeable engines for running pipeline steps: a deterministic
// single-threaded simulator and a depth-parallel runtime with one worker per
// module, barrier-synchronized per computation step. Both call the same
// per-module step functions in the same per-module order, so their gradients
// and traces agree bitwise.

namespace sideways {

enum class ExecMode { kSimulator, kParallel };
enum class TrainMode { kBp, kSideways };

struct ExecutorConfig {
  ExecMode mode = ExecMode::kSimulator;
  int workers = 1;  // must equal D in parallel mode
  long artificial_flops_per_module = 0;
  std::uint64_t seed = 0;
};

struct UtilizationRow {
  int step = 0;
  int module = 0;  // 1-based
  int busy = 0;
};

template <typename Scalar>
struct RunResult {
  std::vector<std::optional<ModuleGrads<Scalar>>> grads;
  StepTrace trace;
  double seconds = 0;
  double seconds_per_step = 0;
  int steps = 0;
  double mean_loss = 0;
};

class WorkerFailure : public std::runtime_error {
 public:
  explicit WorkerFailure(const std::string& what)
      : std::runtime_error("episode aborted, worker failed: " + what) {}
};

namespace detail {

template <typename Scalar>
void check_executor_config(const ExecutorConfig& cfg, const NetworkSpec<Scalar>& net) {
  if (cfg.workers < 1) throw std::invalid_argument("executor workers must be >= 1");
  if (cfg.mode == ExecMode::kParallel && cfg.workers != net.depth()) {
    throw std::invalid_argument("parallel mode requires workers == depth (" +
                                std::to_string(net.depth()) + "), got " +
                                std::to_string(cfg.workers));
  }
}

template <typename Scalar>
void fill_result_from_bp(RunResult<Scalar>& res, BpEpisodeResult<Scalar>&& bp) {
  res.trace = std::move(bp.trace);
  res.mean_loss = bp.mean_loss;
  for (auto& g : bp.grads) res.grads.emplace_back(std::move(g));
}

// Depth-parallel episode loop. Each worker owns one module; a barrier closes
// every computation step. `work(worker, step)` runs the worker's share of one
// step and must touch only module-local state plus the double-buffered slots.
template <typename Work>
void parallel_steps(int workers, int total_steps, Work&& work) {
  std::mutex err_mu;
  std::exception_ptr first_error;
  std::atomic<bool> abort{false};
  std::barrier<> sync(workers);
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      for (int t = 1; t <= total_steps; ++t) {
        if (!abort.load(std::memory_order_relaxed)) {
          try {
            work(w, t);
          } catch (...) {
            {
              std::lock_guard<std::mutex> lock(err_mu);
              if (!first_error) first_error = std::current_exception();
            }
            abort.store(true, std::memory_order_relaxed);
          }
        }
        sync.arrive_and_wait();
      }
    });
  }
  for (auto& th : threads) th.join();
  if (first_error) {
    try {
      std::rethrow_exception(first_error);
    } catch (const std::exception& e) {
      throw WorkerFailure(e.what());
    }
  }
}

}  // namespace detail

// Runs one full episode (clip plus drain for Sideways; per-frame cycles for
// BP) under the configured engine.
template <typename Scalar>
RunResult<Scalar> run_episode(const ExecutorConfig& cfg, NetworkSpec<Scalar>& net,
                              const Episode<Scalar>& ep, TrainMode mode) {
  detail::check_executor_config(cfg, net);
  const int d = net.depth();
  const long spin = cfg.artificial_flops_per_module;
  RunResult<Scalar> res;
  const auto t0 = std::chrono::steady_clock::now();

  if (mode == TrainMode::kSideways) {
    PipelineState<Scalar> state;
    restart(state, net);
    const int steps = episode_step_count(net, ep);
    res.steps = steps;
    if (cfg.mode == ExecMode::kSimulator) {
      for (int t = 0; t < steps; ++t) sideways_step(net, ep, state, spin);
    } else {
      state.trace.records.resize(static_cast<std::size_t>(steps) * d);
      for (std::size_t r = 0; r < state.trace.records.size(); ++r) {
        // step/module fields are filled by the owning worker
      }
      state.trace.losses.reserve(static_cast<std::size_t>(ep.length()));
      detail::parallel_steps(d, steps, [&](int worker, int t) {
        sideways_module_step(net, ep, state, t, worker, spin);
      });
      state.step = steps;
    }
    res.grads = finish_episode(state);
    res.trace = std::move(state.trace);
    double total = 0;
    for (const auto& ev : res.trace.losses) total += ev.loss;
    res.mean_loss = res.trace.losses.empty() ? 0 : total / res.trace.losses.size();
  } else {
    const int steps = ep.length() * cycle_length(d);
    res.steps = steps;
    if (cfg.mode == ExecMode::kSimulator && spin == 0) {
      detail::fill_result_from_bp(res, bp_episode(net, ep));
    } else {
      // Single-module work items scheduled per step; in parallel mode at most
      // one worker is busy per step, the rest idle at the barrier.
      std::vector<ModuleGrads<Scalar>> acc;
      for (const auto& m : net.modules) acc.push_back(zeros_like_grads(m.layers));
      StepTrace trace;
      trace.records.resize(static_cast<std::size_t>(steps) * d);
      const auto items = bp_cycle_items(d);
      double total_loss = 0;
      for (int frame = 1; frame <= ep.length(); ++frame) {
        const int base = (frame - 1) * cycle_length(d);
        for (int s = 0; s < cycle_length(d); ++s) {
          for (int i = 0; i < d; ++i) {
            auto& rec = trace.records[static_cast<std::size_t>(base + s) * d + i];
            rec.step = base + s + 1;
            rec.module = i + 1;
          }
        }
        BpCycleState<Scalar> cyc;
        auto run_item = [&](const BpWorkItem& item) {
          bp_apply_item(net, ep, frame, item, cyc, acc, spin);
          auto& rec =
              trace.records[static_cast<std::size_t>(base + item.step - 1) * d +
                            item.module];
          if (item.kind == BpWorkKind::kForward) {
            rec.fwd_origin = frame;
          } else {
            rec.bwd_origin = frame;
            rec.masked = false;
          }
          if (item.kind == BpWorkKind::kBackwardTop) {
            trace.losses.push_back({base + item.step, frame, cyc.frame_loss});
          }
        };
        if (cfg.mode == ExecMode::kSimulator) {
          for (const auto& item : items) run_item(item);
        } else {
          detail::parallel_steps(d, cycle_length(d), [&](int worker, int t) {
            for (const auto& item : items) {
              if (item.step == t && item.module == worker) run_item(item);
            }
          });
        }
        total_loss += cyc.frame_loss;
      }
      for (auto& g : acc) {
        scale_grads(g, Scalar(1) / Scalar(ep.length()));
        res.grads.emplace_back(std::move(g));
      }
      res.trace = std::move(trace);
      res.mean_loss = total_loss / ep.length();
    }
  }

  const auto t1 = std::chrono::steady_clock::now();
  res.seconds = std::chrono::duration<double>(t1 - t0).count();
  res.seconds_per_step = res.steps > 0 ? res.seconds / res.steps : 0;
  return res;
}

// busy = the module did forward or backward work at that step.
inline std::vector<UtilizationRow> utilization_from_trace(const StepTrace& trace) {
  std::vector<UtilizationRow> rows;
  rows.reserve(trace.records.size());
  for (const auto& r : trace.records) {
    rows.push_back({r.step, r.module,
                    (r.fwd_origin.has_value() || r.bwd_origin.has_value()) ? 1 : 0});
  }
  return rows;
}

inline void write_utilization_csv(std::ostream& os,
                                  const std::vector<UtilizationRow>& rows) {
  os << "step,module,busy\n";
  for (const auto& r : rows) os << r.step << ',' << r.module << ',' << r.busy << "\n";
}

struct SpeedupReport {
  double steps_per_sec_bp = 0;
  double steps_per_sec_sideways = 0;
  double ratio = 0;
  int depth = 0;
  int cores = 0;
  double per_module_ms = 0;
  int steps_per_run = 0;
  int repeats = 0;
};

// Best-of-3 averages of 100-step runs; one training step processes one frame
// in either mode. The artificial per-module load should dominate
// synchronization (>= 10 ms per module is the working heuristic).
template <typename Scalar>
SpeedupReport bench_speedup(const ExecutorConfig& cfg, NetworkSpec<Scalar>& net,
                            int n_steps = 100, int repeats = 3) {
  detail::check_executor_config(cfg, net);
  const int d = net.depth();
  SpeedupReport report;
  report.depth = d;
  report.cores = static_cast<int>(std::thread::hardware_concurrency());
  report.steps_per_run = n_steps;
  report.repeats = repeats;

  // Random frames, as in the paper's throughput protocol.
  std::mt19937_64 rng(cfg.seed);
  Episode<Scalar> ep;
  ep.task = net.task;
  ep.label = net.task == TaskKind::kClassification ? 0 : -1;
  const auto& is = net.input_shape;
  for (int t = 0; t < n_steps; ++t) {
    Tensor<Scalar> f({is[0], is[1], is[2]});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::int64_t i = 0; i < f.size(); ++i) f[i] = static_cast<Scalar>(u(rng));
    ep.frames.push_back(std::move(f));
  }

  // calibrate the spin count once if the caller gave a time budget via flops
  {
    const auto c0 = std::chrono::steady_clock::now();
    spin_load(cfg.artificial_flops_per_module);
    const auto c1 = std::chrono::steady_clock::now();
    report.per_module_ms = std::chrono::duration<double, std::milli>(c1 - c0).count();
  }

  auto best_steps_per_sec = [&](TrainMode mode) {
    double best = 0;
    for (int r = 0; r < repeats; ++r) {
      NetworkSpec<Scalar> scratch = net;
      // Sideways: one frame enters per computation step, so n_steps pipeline
      // steps process n_steps frames. BP: one frame per 2D-1 blocked steps.
      Episode<Scalar> run_ep = ep;
      const auto b0 = std::chrono::steady_clock::now();
      if (mode == TrainMode::kSideways) {
        PipelineState<Scalar> state;
        restart(state, scratch);
        if (cfg.mode == ExecMode::kParallel) {
          state.trace.records.resize(static_cast<std::size_t>(n_steps) * d);
          state.trace.losses.reserve(static_cast<std::size_t>(n_steps));
          detail::parallel_steps(d, n_steps, [&](int worker, int t) {
            sideways_module_step(scratch, run_ep, state, t, worker,
                                 cfg.artificial_flops_per_module);
          });
        } else {
          for (int t = 0; t < n_steps; ++t) {
            sideways_step(scratch, run_ep, state, cfg.artificial_flops_per_module);
          }
        }
      } else {
        ExecutorConfig one = cfg;
        Episode<Scalar> bp_ep = ep;
        bp_ep.frames.resize(static_cast<std::size_t>(n_steps));
        run_episode(one, scratch, bp_ep, TrainMode::kBp);
      }
      const auto b1 = std::chrono::steady_clock::now();
      const double secs = std::chrono::duration<double>(b1 - b0).count();
      best = std::max(best, n_steps / secs);
    }
    return best;
  };

  report.steps_per_sec_bp = best_steps_per_sec(TrainMode::kBp);
  report.steps_per_sec_sideways = best_steps_per_sec(TrainMode::kSideways);
  report.ratio = report.steps_per_sec_sideways / report.steps_per_sec_bp;
  return report;
}

}  // namespace sideways
