#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sideways/executor.hpp"
#include "sideways/data.hpp"
#include "sideways/network.hpp"
#include "sideways/optimizer.hpp"

// Flat dotted-key config (human-diffable) and the versioned checkpoint
// format. All paper-default values are pre-filled so training runs out of
// the box.

namespace sideways {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct RunConfig {
  // task
  std::string task_kind = "classification";  // or "autoencoding"
  int num_classes = 4;

  // data (paper defaults: 112x112 frames, sequence length 64)
  int height = 112;
  int width = 112;
  int channels = 3;
  int frames = 64;
  double delta = 1.0;
  int sprites = 3;
  std::string class_rule = "direction";  // or "shape"
  int stride_skip = 0;  // skip k frames with striding k+1
  int pool = 64;        // fixed training-set size, clips

  // network
  std::vector<int> conv_channels{32, 64, 64, 128, 256};

  // optimizer
  std::string opt_rule = "adam";
  double lr = 1e-4;
  double clip_value = 1.0;
  double weight_decay = 0.0;
  int warmup_epochs = 5;
  std::vector<int> decay_epochs{100, 200};
  double decay_factor = 10.0;

  // executor
  std::string exec_mode = "simulator";  // or "parallel"
  int workers = 1;
  long artificial_flops = 0;

  // run
  std::string mode = "sideways";  // or "bp"
  std::uint64_t seed = 0;
  int epochs = 1;
  int iterations = 500;  // per epoch
  int batch = 8;         // episodes per update
  std::string outdir = "out";
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (...) {
      throw ConfigError("bad integer '" + item + "' in " + key);
    }
  }
  if (out.empty()) throw ConfigError(key + " must be a non-empty list");
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

template <typename T>
std::string num_str(T v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline std::string serialize_config(const RunConfig& c) {
  std::map<std::string, std::string> kv;
  kv["task.kind"] = c.task_kind;
  kv["task.classes"] = detail::num_str(c.num_classes);
  kv["data.height"] = detail::num_str(c.height);
  kv["data.width"] = detail::num_str(c.width);
  kv["data.channels"] = detail::num_str(c.channels);
  kv["data.frames"] = detail::num_str(c.frames);
  kv["data.delta"] = detail::num_str(c.delta);
  kv["data.sprites"] = detail::num_str(c.sprites);
  kv["data.rule"] = c.class_rule;
  kv["data.stride_skip"] = detail::num_str(c.stride_skip);
  kv["data.pool"] = detail::num_str(c.pool);
  kv["network.channels"] = detail::join_ints(c.conv_channels);
  kv["optimizer.rule"] = c.opt_rule;
  kv["optimizer.lr"] = detail::num_str(c.lr);
  kv["optimizer.clip"] = detail::num_str(c.clip_value);
  kv["optimizer.weight_decay"] = detail::num_str(c.weight_decay);
  kv["optimizer.warmup_epochs"] = detail::num_str(c.warmup_epochs);
  kv["optimizer.decay_epochs"] = detail::join_ints(c.decay_epochs);
  kv["optimizer.decay_factor"] = detail::num_str(c.decay_factor);
  kv["executor.mode"] = c.exec_mode;
  kv["executor.workers"] = detail::num_str(c.workers);
  kv["executor.flops"] = detail::num_str(c.artificial_flops);
  kv["run.mode"] = c.mode;
  kv["run.seed"] = detail::num_str(c.seed);
  kv["run.epochs"] = detail::num_str(c.epochs);
  kv["run.iterations"] = detail::num_str(c.iterations);
  kv["run.batch"] = detail::num_str(c.batch);
  kv["run.outdir"] = c.outdir;
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
  return os.str();
}

inline void apply_config_entry(RunConfig& c, const std::string& key,
                               const std::string& value) {
  auto to_int = [&](const std::string& v) {
    try { return std::stoi(v); } catch (...) {
      throw ConfigError("field " + key + ": bad integer '" + v + "'");
    }
  };
  auto to_long = [&](const std::string& v) {
    try { return std::stol(v); } catch (...) {
      throw ConfigError("field " + key + ": bad integer '" + v + "'");
    }
  };
  auto to_double = [&](const std::string& v) {
    try { return std::stod(v); } catch (...) {
      throw ConfigError("field " + key + ": bad number '" + v + "'");
    }
  };
  if (key == "task.kind") {
    if (value != "classification" && value != "autoencoding") {
      throw ConfigError("field task.kind: expected classification|autoencoding, got '" +
                        value + "'");
    }
    c.task_kind = value;
  } else if (key == "task.classes") c.num_classes = to_int(value);
  else if (key == "data.height") c.height = to_int(value);
  else if (key == "data.width") c.width = to_int(value);
  else if (key == "data.channels") c.channels = to_int(value);
  else if (key == "data.frames") c.frames = to_int(value);
  else if (key == "data.delta") c.delta = to_double(value);
  else if (key == "data.sprites") c.sprites = to_int(value);
  else if (key == "data.rule") {
    if (value != "direction" && value != "shape") {
      throw ConfigError("field data.rule: expected direction|shape, got '" + value + "'");
    }
    c.class_rule = value;
  } else if (key == "data.stride_skip") c.stride_skip = to_int(value);
  else if (key == "data.pool") c.pool = to_int(value);
  else if (key == "network.channels") c.conv_channels = detail::parse_int_list(value, key);
  else if (key == "optimizer.rule") {
    if (value != "sgd" && value != "momentum" && value != "adam") {
      throw ConfigError("field optimizer.rule: expected sgd|momentum|adam, got '" +
                        value + "'");
    }
    c.opt_rule = value;
  } else if (key == "optimizer.lr") c.lr = to_double(value);
  else if (key == "optimizer.clip") c.clip_value = to_double(value);
  else if (key == "optimizer.weight_decay") c.weight_decay = to_double(value);
  else if (key == "optimizer.warmup_epochs") c.warmup_epochs = to_int(value);
  else if (key == "optimizer.decay_epochs") c.decay_epochs = detail::parse_int_list(value, key);
  else if (key == "optimizer.decay_factor") c.decay_factor = to_double(value);
  else if (key == "executor.mode") {
    if (value != "simulator" && value != "parallel") {
      throw ConfigError("field executor.mode: expected simulator|parallel, got '" +
                        value + "'");
    }
    c.exec_mode = value;
  } else if (key == "executor.workers") c.workers = to_int(value);
  else if (key == "executor.flops") c.artificial_flops = to_long(value);
  else if (key == "run.mode") {
    if (value != "bp" && value != "sideways") {
      throw ConfigError("field run.mode: expected bp|sideways, got '" + value + "'");
    }
    c.mode = value;
  } else if (key == "run.seed") c.seed = std::stoull(value);
  else if (key == "run.epochs") c.epochs = to_int(value);
  else if (key == "run.iterations") c.iterations = to_int(value);
  else if (key == "run.batch") c.batch = to_int(value);
  else if (key == "run.outdir") c.outdir = value;
  else throw ConfigError("unknown config field '" + key + "'");
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    apply_config_entry(c, detail::trim(line.substr(0, eq)),
                       detail::trim(line.substr(eq + 1)));
  }
  return c;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

// ---------------------------------------------------------------------------
// Checkpoint: "SWCK" magic, u32 format version, architecture, parameters
// stored as little-endian float64.
// ---------------------------------------------------------------------------

constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32le(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw ConfigError(std::string("truncated checkpoint at ") + what);
  }
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

inline void put_f64le(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64le(std::istream& is, const char* what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) {
    throw ConfigError(std::string("truncated checkpoint at ") + what);
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(const std::string& path, const NetworkSpec<Scalar>& net) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  os.write("SWCK", 4);
  detail::put_u32le(os, kCheckpointVersion);
  detail::put_u32le(os, net.task == TaskKind::kClassification ? 0 : 1);
  detail::put_u32le(os, std::uint32_t(net.num_classes));
  for (int a : net.input_shape) detail::put_u32le(os, std::uint32_t(a));
  detail::put_u32le(os, std::uint32_t(net.depth()));
  for (const auto& m : net.modules) {
    detail::put_u32le(os, std::uint32_t(m.layers.size()));
    for (const auto& l : m.layers) {
      detail::put_u32le(os, std::uint32_t(l.kind));
      detail::put_u32le(os, std::uint32_t(l.stride));
      detail::put_u32le(os, l.padding == Padding::kSame ? 0 : 1);
      detail::put_u32le(os, std::uint32_t(l.params.size()));
      for (const auto& p : l.params) {
        detail::put_u32le(os, std::uint32_t(p.rank()));
        for (int a = 0; a < p.rank(); ++a) detail::put_u32le(os, std::uint32_t(p.dim(a)));
        for (std::int64_t i = 0; i < p.size(); ++i) detail::put_f64le(os, double(p[i]));
      }
    }
  }
  if (!os) throw ConfigError("write failed for " + path);
}

template <typename Scalar>
NetworkSpec<Scalar> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SWCK", 4) != 0) {
    throw ConfigError("bad checkpoint magic in " + path);
  }
  const std::uint32_t version = detail::get_u32le(is, "version");
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  NetworkSpec<Scalar> net;
  net.task = detail::get_u32le(is, "task") == 0 ? TaskKind::kClassification
                                                : TaskKind::kAutoencoding;
  net.num_classes = int(detail::get_u32le(is, "classes"));
  for (int a = 0; a < 3; ++a) net.input_shape[a] = int(detail::get_u32le(is, "shape"));
  const std::uint32_t depth = detail::get_u32le(is, "depth");
  for (std::uint32_t mi = 0; mi < depth; ++mi) {
    Module<Scalar> m;
    const std::uint32_t nlayers = detail::get_u32le(is, "layers");
    for (std::uint32_t li = 0; li < nlayers; ++li) {
      Layer<Scalar> l;
      l.kind = LayerKind(detail::get_u32le(is, "kind"));
      l.stride = int(detail::get_u32le(is, "stride"));
      l.padding = detail::get_u32le(is, "padding") == 0 ? Padding::kSame : Padding::kValid;
      const std::uint32_t nparams = detail::get_u32le(is, "params");
      for (std::uint32_t pi = 0; pi < nparams; ++pi) {
        const std::uint32_t rank = detail::get_u32le(is, "rank");
        std::vector<int> shape;
        for (std::uint32_t a = 0; a < rank; ++a) {
          shape.push_back(int(detail::get_u32le(is, "dim")));
        }
        Tensor<Scalar> p(shape);
        for (std::int64_t i = 0; i < p.size(); ++i) {
          p[i] = static_cast<Scalar>(detail::get_f64le(is, "value"));
        }
        l.params.push_back(std::move(p));
      }
      m.layers.push_back(std::move(l));
    }
    net.modules.push_back(std::move(m));
  }
  return net;
}

// Builders from config ------------------------------------------------------

template <typename Scalar>
NetworkSpec<Scalar> build_network(const RunConfig& c, std::uint64_t seed) {
  std::array<int, 3> shape{c.height, c.width, c.channels};
  if (c.task_kind == "classification") {
    return build_simple_cnn<Scalar>(c.conv_channels, c.num_classes, shape, seed);
  }
  return build_autoencoder<Scalar>(c.conv_channels, shape, seed);
}

inline SpriteSceneSpec scene_from_config(const RunConfig& c) {
  SpriteSceneSpec spec;
  spec.n_sprites = c.sprites;
  spec.delta = c.delta;
  spec.rule = c.class_rule == "direction" ? ClassRule::kMotionDirection4
                                          : ClassRule::kShapeClass;
  const double cap = 0.4 * std::min(c.height, c.width);
  spec.min_size = std::min(3.0, cap);
  spec.max_size = std::min(6.0, cap);
  return spec;
}

inline LrSchedule schedule_from_config(const RunConfig& c) {
  LrSchedule s;
  s.base_lr = c.lr;
  s.warmup_epochs = c.warmup_epochs;
  s.decay_epochs = c.decay_epochs;
  s.decay_factor = c.decay_factor;
  s.iters_per_epoch = c.iterations;
  return s;
}

inline ExecutorConfig executor_from_config(const RunConfig& c) {
  ExecutorConfig e;
  e.mode = c.exec_mode == "parallel" ? ExecMode::kParallel : ExecMode::kSimulator;
  e.workers = c.workers;
  e.artificial_flops_per_module = c.artificial_flops;
  e.seed = c.seed;
  return e;
}

inline OptRule opt_rule_from_config(const RunConfig& c) {
  if (c.opt_rule == "sgd") return OptRule::kSgd;
  if (c.opt_rule == "momentum") return OptRule::kMomentum;
  return OptRule::kAdam;
}

}  // namespace sideways
