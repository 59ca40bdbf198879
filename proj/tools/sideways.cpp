// Operator surface: train, gradcheck, trace, bench, realtime-compare.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "sideways/config.hpp"
#include "sideways/gradcheck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sideways;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitConfigError = 2;

RunConfig make_config(const std::string& config_path,
                      const std::vector<std::string>& overrides) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_config_file(config_path);
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    }
    apply_config_entry(cfg, detail::trim(kv.substr(0, eq)),
                       detail::trim(kv.substr(eq + 1)));
  }
  return cfg;
}

using S = float;  // single precision is the training default

Episode<S> clip_to_episode(const Clip<S>& clip, TaskKind task) {
  Episode<S> ep;
  ep.frames = clip.frames;
  ep.task = task;
  ep.label = clip.label.value_or(-1);
  return ep;
}

Clip<S> sample_clip(const RunConfig& cfg, std::uint64_t clip_seed) {
  const SpriteSceneSpec spec = scene_from_config(cfg);
  const int skip = cfg.stride_skip;
  Clip<S> clip = generate_clip<S>(spec, cfg.frames * (skip + 1), cfg.height,
                                  cfg.width, cfg.channels, clip_seed);
  if (skip > 0) clip = stride_subsample(clip, skip);
  return clip;
}

struct BatchStats {
  double loss = 0;
  double grad_mean = 0;
  double grad_l2 = 0;
  double score = 0;  // accuracy (classification) or mse (autoencoding)
};

void grad_moments(const std::vector<std::optional<ModuleGrads<S>>>& grads,
                  double* mean, double* l2) {
  double total = 0, sq = 0;
  long n = 0;
  for (const auto& g : grads) {
    if (!g) continue;
    for (const auto& layer : *g) {
      for (const auto& p : layer) {
        total += double(p.vec().template cast<double>().sum());
        sq += double(p.vec().template cast<double>().squaredNorm());
        n += p.size();
      }
    }
  }
  *mean = n ? total / n : 0;
  *l2 = std::sqrt(sq);
}

int predict_clip(NetworkSpec<S>& net, const Clip<S>& clip) {
  Tensor<S> mean_logits({net.num_classes});
  NetworkSpec<S> scratch = net;
  for (int t = 1; t <= clip.length(); ++t) {
    Tensor<S> h = clip.frames[static_cast<std::size_t>(t - 1)];
    for (auto& m : scratch.modules) h = module_forward(m, h, t);
    mean_logits.vec() += h.vec();
  }
  int best = 0;
  for (int c = 1; c < net.num_classes; ++c) {
    if (mean_logits[c] > mean_logits[best]) best = c;
  }
  return best;
}

// Fixed training set: pool of clips drawn once from the run seed.
std::vector<Clip<S>> build_pool(const RunConfig& cfg) {
  std::vector<Clip<S>> pool;
  for (int i = 0; i < cfg.pool; ++i) {
    pool.push_back(sample_clip(cfg, cfg.seed * 1000003 + i));
  }
  return pool;
}

std::vector<const Clip<S>*> pick_batch(const std::vector<Clip<S>>& pool, int batch,
                                       std::uint64_t iter_seed) {
  std::mt19937_64 rng(iter_seed);
  std::vector<const Clip<S>*> out;
  for (int b = 0; b < batch; ++b) {
    out.push_back(&pool[rng() % pool.size()]);
  }
  return out;
}

// One classification training iteration: batch of episodes, averaged
// (pseudo-)gradients, one weight update at the episode boundary.
BatchStats train_classification_iteration(const RunConfig& cfg,
                                          const std::vector<Clip<S>>& pool,
                                          NetworkSpec<S>& net,
                                          Optimizer<S>& opt, double lr,
                                          std::uint64_t iter_seed) {
  const ExecutorConfig exec = executor_from_config(cfg);
  const TrainMode mode = cfg.mode == "bp" ? TrainMode::kBp : TrainMode::kSideways;
  std::vector<std::optional<ModuleGrads<S>>> batch_grads(
      static_cast<std::size_t>(net.depth()));
  std::vector<int> counts(static_cast<std::size_t>(net.depth()), 0);
  BatchStats stats;
  const auto clips = pick_batch(pool, cfg.batch, iter_seed);
  for (const Clip<S>* clip : clips) {
    const Episode<S> ep = clip_to_episode(*clip, TaskKind::kClassification);
    auto res = run_episode(exec, net, ep, mode);
    stats.loss += res.mean_loss / cfg.batch;
    for (int i = 0; i < net.depth(); ++i) {
      auto& g = res.grads[static_cast<std::size_t>(i)];
      if (!g) continue;
      auto& sum = batch_grads[static_cast<std::size_t>(i)];
      if (!sum) {
        sum = std::move(*g);
      } else {
        add_grads(*sum, *g);
      }
      counts[static_cast<std::size_t>(i)] += 1;
    }
  }
  for (int i = 0; i < net.depth(); ++i) {
    if (counts[static_cast<std::size_t>(i)] > 0) {
      scale_grads(*batch_grads[static_cast<std::size_t>(i)],
                  S(1) / S(counts[static_cast<std::size_t>(i)]));
    }
  }
  grad_moments(batch_grads, &stats.grad_mean, &stats.grad_l2);
  opt.apply_update(net, batch_grads, lr);
  int correct = 0;
  for (const Clip<S>* clip : clips) {
    if (predict_clip(net, *clip) == clip->label.value_or(-1)) ++correct;
  }
  stats.score = double(correct) / cfg.batch;
  return stats;
}

// Autoencoding: Sideways updates each module at every loss event (L=1); BP
// updates after every per-frame cycle.
BatchStats train_autoencoding_iteration(const RunConfig& cfg,
                                        const std::vector<Clip<S>>& pool,
                                        NetworkSpec<S>& net,
                                        Optimizer<S>& opt, double lr,
                                        std::uint64_t iter_seed) {
  BatchStats stats;
  std::vector<std::optional<ModuleGrads<S>>> last_grads;
  double loss_total = 0;
  long loss_events = 0;
  const auto clips = pick_batch(pool, cfg.batch, iter_seed);
  for (const Clip<S>* clip : clips) {
    const Episode<S> ep = clip_to_episode(*clip, TaskKind::kAutoencoding);
    if (cfg.mode == "sideways") {
      PipelineState<S> state;
      restart(state, net);
      const int steps = episode_step_count(net, ep);
      for (int t = 0; t < steps; ++t) {
        sideways_step(net, ep, state);
        auto grads = consume_step_grads(state);
        opt.apply_update(net, grads, lr);
        last_grads = std::move(grads);
      }
      for (const auto& ev : state.trace.losses) loss_total += ev.loss;
      loss_events += static_cast<long>(state.trace.losses.size());
    } else {
      for (int t = 1; t <= ep.length(); ++t) {
        Episode<S> single;
        single.task = TaskKind::kAutoencoding;
        single.frames.push_back(ep.frames[static_cast<std::size_t>(t - 1)]);
        auto res = bp_episode(net, single);
        loss_total += res.mean_loss;
        loss_events += 1;
        std::vector<std::optional<ModuleGrads<S>>> grads;
        for (auto& g : res.grads) grads.emplace_back(std::move(g));
        opt.apply_update(net, grads, lr);
        last_grads = std::move(grads);
      }
    }
  }
  stats.loss = loss_events ? loss_total / loss_events : 0;
  stats.score = stats.loss;  // the task metric is the reconstruction MSE
  grad_moments(last_grads, &stats.grad_mean, &stats.grad_l2);
  return stats;
}

int cmd_train(const RunConfig& cfg) {
  fs::create_directories(cfg.outdir);
  NetworkSpec<S> net = build_network<S>(cfg, cfg.seed);
  Optimizer<S> opt(opt_rule_from_config(cfg), cfg.clip_value, cfg.weight_decay);
  LrSchedule sched = schedule_from_config(cfg);
  const std::vector<Clip<S>> pool = build_pool(cfg);

  std::ofstream metrics(fs::path(cfg.outdir) / "metrics.csv");
  metrics << "iteration,epoch,mode,loss,grad_mean,grad_l2,accuracy_or_mse,lr\n";
  long global_iter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int iter = 0; iter < cfg.iterations; ++iter, ++global_iter) {
      const double lr = lr_at(sched, epoch, iter);
      const std::uint64_t iter_seed =
          cfg.seed ^ (std::uint64_t(global_iter) * 0x9e3779b97f4a7c15ull + 1);
      const BatchStats stats =
          cfg.task_kind == "classification"
              ? train_classification_iteration(cfg, pool, net, opt, lr, iter_seed)
              : train_autoencoding_iteration(cfg, pool, net, opt, lr, iter_seed);
      metrics << global_iter << ',' << epoch << ',' << cfg.mode << ','
              << stats.loss << ',' << stats.grad_mean << ',' << stats.grad_l2
              << ',' << stats.score << ',' << lr << '\n';
      metrics.flush();  // crashes keep partial curves
      if (global_iter % 50 == 0) {
        std::cout << "iter " << global_iter << " loss " << stats.loss
                  << " metric " << stats.score << "\n";
      }
    }
  }
  save_checkpoint(std::string(fs::path(cfg.outdir) / "checkpoint.bin"), net);
  std::ofstream cfg_out(fs::path(cfg.outdir) / "config.txt");
  cfg_out << serialize_config(cfg);
  return kExitOk;
}

int cmd_gradcheck(int inject_fault_module) {
  GradcheckOptions opt;
  opt.inject_fault_module = inject_fault_module;
  const GradcheckReport report = run_gradcheck(opt);
  for (const auto& line : report.checks) std::cout << line << "\n";
  if (!report.passed) {
    for (const auto& f : report.failures) std::cerr << "failed: " << f << "\n";
    return kExitCheckFailure;
  }
  return kExitOk;
}

int cmd_trace(const RunConfig& cfg) {
  fs::create_directories(cfg.outdir);
  NetworkSpec<S> net = build_network<S>(cfg, cfg.seed);
  Clip<S> clip = sample_clip(cfg, cfg.seed);
  const Episode<S> ep = clip_to_episode(clip, net.task);
  const ExecutorConfig exec = executor_from_config(cfg);
  const TrainMode mode = cfg.mode == "bp" ? TrainMode::kBp : TrainMode::kSideways;
  auto res = run_episode(exec, net, ep, mode);
  std::ofstream os(fs::path(cfg.outdir) / "trace.jsonl");
  res.trace.write_jsonl(os);
  std::ofstream util(fs::path(cfg.outdir) / "utilization.csv");
  write_utilization_csv(util, utilization_from_trace(res.trace));
  std::cout << "wrote " << res.trace.records.size() << " trace records to "
            << (fs::path(cfg.outdir) / "trace.jsonl").string() << "\n";
  return kExitOk;
}

int cmd_bench(const RunConfig& cfg) {
  fs::create_directories(cfg.outdir);
  NetworkSpec<S> net = build_network<S>(cfg, cfg.seed);
  ExecutorConfig exec = executor_from_config(cfg);
  const SpeedupReport rep = bench_speedup(exec, net, 100, 3);
  json j;
  j["steps_per_sec_bp"] = rep.steps_per_sec_bp;
  j["steps_per_sec_sideways"] = rep.steps_per_sec_sideways;
  j["ratio"] = rep.ratio;
  j["depth"] = rep.depth;
  j["cores"] = rep.cores;
  j["per_module_ms"] = rep.per_module_ms;
  j["steps_per_run"] = rep.steps_per_run;
  j["repeats"] = rep.repeats;
  std::ofstream os(fs::path(cfg.outdir) / "report.json");
  os << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

// Real-time autoencoding comparison: both modes stream one frame per
// computation step. BP may only accept a frame every 2D-1 steps and copies
// its last output meanwhile; Sideways uses every frame.
int cmd_realtime_compare(const RunConfig& cfg) {
  fs::create_directories(cfg.outdir);
  RunConfig acfg = cfg;
  acfg.task_kind = "autoencoding";

  NetworkSpec<S> bp_net = build_network<S>(acfg, acfg.seed);
  NetworkSpec<S> sw_net = build_network<S>(acfg, acfg.seed);
  Optimizer<S> bp_opt(opt_rule_from_config(acfg), acfg.clip_value, acfg.weight_decay);
  Optimizer<S> sw_opt(opt_rule_from_config(acfg), acfg.clip_value, acfg.weight_decay);
  const int d = bp_net.depth();
  long dropped_total = 0;
  long arrived_total = 0;

  for (int iter = 0; iter < acfg.iterations; ++iter) {
    Clip<S> clip = sample_clip(acfg, acfg.seed * 7919 + iter + 1);
    const Episode<S> ep = clip_to_episode(clip, TaskKind::kAutoencoding);
    const double lr = acfg.lr;

    // Sideways: per-step loss events, immediate L=1 updates.
    {
      PipelineState<S> state;
      restart(state, sw_net);
      for (int t = 1; t <= ep.length(); ++t) {
        sideways_step(sw_net, ep, state);
        sw_opt.apply_update(sw_net, consume_step_grads(state), lr);
      }
    }
    // Blocking BP: trains only on the frames it accepts.
    for (int t = 1; t <= ep.length(); ++t) {
      ++arrived_total;
      if (!bp_accepts_frame(t, d)) {
        ++dropped_total;
        continue;
      }
      Episode<S> single;
      single.task = TaskKind::kAutoencoding;
      single.frames.push_back(ep.frames[static_cast<std::size_t>(t - 1)]);
      auto res = bp_episode(bp_net, single);
      std::vector<std::optional<ModuleGrads<S>>> grads;
      for (auto& g : res.grads) grads.emplace_back(std::move(g));
      bp_opt.apply_update(bp_net, grads, lr);
    }
  }

  // Held-out evaluation at one frame per step; both models emit their first
  // output at step D, so MSE is measured over steps D..K.
  double bp_mse = 0, sw_mse = 0;
  long pixels = 0;
  long dropped_eval = 0;
  const int eval_clips = 8;
  for (int e = 0; e < eval_clips; ++e) {
    Clip<S> clip = sample_clip(acfg, acfg.seed * 104729 + 500000 + e);
    auto bp_out = realtime_bp_autoencode(bp_net, clip.frames);
    dropped_eval += static_cast<long>(bp_out.dropped.size());
    // Sideways inference: pipelined, one output per step once full.
    Episode<S> ep = clip_to_episode(clip, TaskKind::kAutoencoding);
    PipelineState<S> state;
    restart(state, sw_net);
    std::vector<Tensor<S>> sw_out;
    for (int t = 1; t <= ep.length(); ++t) {
      sideways_step(sw_net, ep, state);
      sw_out.push_back(state.top_output ? state.top_output->value
                                        : Tensor<S>(clip.frames[0].shape()));
    }
    for (int t = d; t <= clip.length(); ++t) {
      const auto& truth = clip.frames[static_cast<std::size_t>(t - 1)];
      bp_mse += double((bp_out.outputs[static_cast<std::size_t>(t - 1)].vec() -
                        truth.vec()).squaredNorm());
      sw_mse += double((sw_out[static_cast<std::size_t>(t - 1)].vec() - truth.vec())
                           .squaredNorm());
      pixels += truth.size();
    }
  }
  bp_mse /= pixels;
  sw_mse /= pixels;

  json j;
  j["bp_mse"] = bp_mse;
  j["sideways_mse"] = sw_mse;
  j["dropped_frames"] = dropped_total;
  j["arrived_frames"] = arrived_total;
  j["dropped_frames_eval"] = dropped_eval;
  j["depth"] = d;
  std::ofstream os(fs::path(cfg.outdir) / "report.json");
  os << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-parallel video training: blocking BP vs Sideways"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "Config file (key = value lines)");
  app.add_option("--set", overrides, "Override a config field, key=value");

  auto* train = app.add_subcommand("train", "Train a model; writes metrics.csv and checkpoint.bin");
  auto* gradcheck = app.add_subcommand("gradcheck", "Run the gradient oracle suite on a tiny net");
  int inject_fault = 0;
  gradcheck->add_option("--inject-fault", inject_fault,
                        "Test fixture: sign-flip the given module's VJP");
  auto* trace = app.add_subcommand("trace", "Emit the schedule trace for one episode");
  auto* bench = app.add_subcommand("bench", "Measure BP vs Sideways training steps per second");
  auto* rtc = app.add_subcommand("realtime-compare",
                                 "Train both modes under the real-time constraint and compare MSE");

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = make_config(config_path, overrides);
    if (train->parsed()) return cmd_train(cfg);
    if (gradcheck->parsed()) return cmd_gradcheck(inject_fault);
    if (trace->parsed()) return cmd_trace(cfg);
    if (bench->parsed()) return cmd_bench(cfg);
    if (rtc->parsed()) return cmd_realtime_compare(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailure;
  }
  return kExitOk;
}
