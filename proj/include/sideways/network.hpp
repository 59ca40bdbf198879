#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sideways/kernels.hpp"
#include "sideways/tensor.hpp"

namespace sideways {

enum class LayerKind { kConv, kDeconv, kRelu, kPool, kLinear };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kDeconv: return "deconv";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kPool: return "pool";
    case LayerKind::kLinear: return "linear";
  }
  return "?";
}

// One primitive layer. conv: params {kernel}; deconv: params {kernel};
// linear: params {weight[, bias]}; relu/pool: no params.
template <typename Scalar>
struct Layer {
  LayerKind kind = LayerKind::kRelu;
  std::vector<Tensor<Scalar>> params;
  int stride = 1;
  Padding padding = Padding::kSame;
};

// Backward of a module is requested while its single-slot activation cache is
// empty; the scheduler's mask is supposed to make this unreachable.
class GradientWithoutActivation : public std::runtime_error {
 public:
  explicit GradientWithoutActivation(int module_index)
      : std::runtime_error("gradient-without-activation at module " +
                           std::to_string(module_index + 1)),
        module_index(module_index) {}
  int module_index;
};

// Gradients for one module: per layer, per parameter tensor.
template <typename Scalar>
using ModuleGrads = std::vector<std::vector<Tensor<Scalar>>>;

template <typename Scalar>
ModuleGrads<Scalar> zeros_like_grads(const std::vector<Layer<Scalar>>& layers) {
  ModuleGrads<Scalar> g(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (const auto& p : layers[l].params) g[l].push_back(Tensor<Scalar>(p.shape()));
  }
  return g;
}

template <typename Scalar>
void add_grads(ModuleGrads<Scalar>& acc, const ModuleGrads<Scalar>& g,
               Scalar scale = Scalar(1)) {
  for (std::size_t l = 0; l < acc.size(); ++l)
    for (std::size_t p = 0; p < acc[l].size(); ++p)
      acc[l][p].vec() += g[l][p].vec() * scale;
}

template <typename Scalar>
void scale_grads(ModuleGrads<Scalar>& g, Scalar scale) {
  for (auto& layer : g)
    for (auto& p : layer) p.vec() *= scale;
}

template <typename Scalar>
double grads_sq_norm(const ModuleGrads<Scalar>& g) {
  double s = 0;
  for (const auto& layer : g)
    for (const auto& p : layer) s += double(p.vec().squaredNorm());
  return s;
}

template <typename Scalar>
Tensor<Scalar> layer_forward(const Layer<Scalar>& layer, const Tensor<Scalar>& x) {
  switch (layer.kind) {
    case LayerKind::kConv:
      return conv2d_forward(x, layer.params[0], layer.stride, layer.padding);
    case LayerKind::kDeconv:
      return deconv2d_forward(x, layer.params[0], layer.stride, layer.padding);
    case LayerKind::kRelu:
      return relu_forward(x);
    case LayerKind::kPool:
      return global_avg_pool_forward(x);
    case LayerKind::kLinear:
      return linear_forward(x, layer.params[0],
                            layer.params.size() > 1 ? &layer.params[1] : nullptr);
  }
  throw std::logic_error("unreachable layer kind");
}

// Returns {per-parameter grads, grad w.r.t. the layer input}.
template <typename Scalar>
std::pair<std::vector<Tensor<Scalar>>, Tensor<Scalar>> layer_vjp(
    const Layer<Scalar>& layer, const Tensor<Scalar>& input,
    const Tensor<Scalar>& upstream) {
  switch (layer.kind) {
    case LayerKind::kConv: {
      auto [gi, gk] = conv2d_vjp(input, layer.params[0], upstream, layer.stride,
                                 layer.padding);
      return {{std::move(gk)}, std::move(gi)};
    }
    case LayerKind::kDeconv: {
      auto [gi, gk] = deconv2d_vjp(input, layer.params[0], upstream, layer.stride,
                                   layer.padding);
      return {{std::move(gk)}, std::move(gi)};
    }
    case LayerKind::kRelu:
      return {{}, relu_vjp(input, upstream)};
    case LayerKind::kPool:
      return {{}, global_avg_pool_vjp(input, upstream)};
    case LayerKind::kLinear: {
      auto g = linear_vjp(input, layer.params[0],
                          layer.params.size() > 1 ? &layer.params[1] : nullptr,
                          upstream);
      std::vector<Tensor<Scalar>> pg;
      pg.push_back(std::move(g.weight));
      if (layer.params.size() > 1) pg.push_back(std::move(g.bias));
      return {std::move(pg), std::move(g.input)};
    }
  }
  throw std::logic_error("unreachable layer kind");
}

// A Sideways module H_i: one or more layers plus a single-slot cache of the
// most recent forward input. The composite decoder is a module like any
// other; its internal activations are stashed per layer so backward can chain
// exact VJPs through the whole block.
template <typename Scalar>
struct Module {
  std::vector<Layer<Scalar>> layers;
  std::vector<Tensor<Scalar>> cached_inputs;  // per layer, most recent forward
  std::optional<int> cached_origin;
};

// Runs H_i and overwrites the cache slot; the previous activation is gone.
template <typename Scalar>
Tensor<Scalar> module_forward(Module<Scalar>& m, const Tensor<Scalar>& h_in,
                              int origin) {
  m.cached_inputs.clear();
  m.cached_inputs.reserve(m.layers.size());
  Tensor<Scalar> h = h_in;
  for (const auto& layer : m.layers) {
    m.cached_inputs.push_back(h);
    h = layer_forward(layer, h);
  }
  m.cached_origin = origin;
  return h;
}

// VJP against whatever activation is cached, regardless of the upstream's
// origin. Does not clear the cache.
template <typename Scalar>
std::pair<ModuleGrads<Scalar>, Tensor<Scalar>> module_backward(
    const Module<Scalar>& m, const Tensor<Scalar>& upstream, int module_index = 0) {
  if (!m.cached_origin.has_value()) throw GradientWithoutActivation(module_index);
  ModuleGrads<Scalar> grads(m.layers.size());
  Tensor<Scalar> g = upstream;
  for (int l = static_cast<int>(m.layers.size()) - 1; l >= 0; --l) {
    auto [pg, gi] = layer_vjp(m.layers[l], m.cached_inputs[l], g);
    grads[l] = std::move(pg);
    g = std::move(gi);
  }
  require_finite(g, "module_backward grad_input");
  return {std::move(grads), std::move(g)};
}

enum class TaskKind { kClassification, kAutoencoding };

template <typename Scalar>
struct NetworkSpec {
  std::vector<Module<Scalar>> modules;
  TaskKind task = TaskKind::kClassification;
  int num_classes = 0;
  std::array<int, 3> input_shape{0, 0, 0};  // H, W, C

  int depth() const { return static_cast<int>(modules.size()); }
};

namespace detail {

template <typename Scalar>
Layer<Scalar> make_conv(int kh, int kw, int cin, int cout, int stride,
                        std::mt19937_64& rng) {
  Layer<Scalar> l;
  l.kind = LayerKind::kConv;
  l.stride = stride;
  const Scalar limit = Scalar(std::sqrt(6.0 / (kh * kw * cin)));
  l.params.push_back(uniform_tensor<Scalar>({kh, kw, cin, cout}, limit, rng));
  return l;
}

template <typename Scalar>
Layer<Scalar> make_deconv(int kh, int kw, int cin, int cout, int stride,
                          std::mt19937_64& rng) {
  Layer<Scalar> l;
  l.kind = LayerKind::kDeconv;
  l.stride = stride;
  const Scalar limit = Scalar(std::sqrt(6.0 / (kh * kw * cin)));
  l.params.push_back(uniform_tensor<Scalar>({kh, kw, cout, cin}, limit, rng));
  return l;
}

template <typename Scalar>
Layer<Scalar> make_linear(int in, int out, bool bias, std::mt19937_64& rng) {
  Layer<Scalar> l;
  l.kind = LayerKind::kLinear;
  const Scalar limit = Scalar(std::sqrt(6.0 / in));
  l.params.push_back(uniform_tensor<Scalar>({out, in}, limit, rng));
  if (bias) l.params.push_back(Tensor<Scalar>({out}));
  return l;
}

inline int conv_stride_at(std::size_t i) {
  // Stride 2 in every second conv starting from the first one.
  return (i % 2 == 0) ? 2 : 1;
}

}  // namespace detail

// Classifier: one conv(3x3)+relu module per channel entry, then a head module
// of global-average-pool + linear (the only layer with a bias). With the
// default five channels this yields D = 6.
template <typename Scalar>
NetworkSpec<Scalar> build_simple_cnn(const std::vector<int>& channels,
                                     int num_classes,
                                     std::array<int, 3> input_shape,
                                     std::uint64_t seed = 0) {
  if (channels.empty()) throw ShapeError("build_simple_cnn: channels empty");
  std::mt19937_64 rng(seed);
  NetworkSpec<Scalar> net;
  net.task = TaskKind::kClassification;
  net.num_classes = num_classes;
  net.input_shape = input_shape;
  int cin = input_shape[2];
  int h = input_shape[0], w = input_shape[1];
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const int stride = detail::conv_stride_at(i);
    Module<Scalar> m;
    m.layers.push_back(detail::make_conv<Scalar>(3, 3, cin, channels[i], stride, rng));
    Layer<Scalar> relu;
    relu.kind = LayerKind::kRelu;
    m.layers.push_back(relu);
    net.modules.push_back(std::move(m));
    cin = channels[i];
    h = (h + stride - 1) / stride;
    w = (w + stride - 1) / stride;
  }
  Module<Scalar> head;
  Layer<Scalar> pool;
  pool.kind = LayerKind::kPool;
  head.layers.push_back(pool);
  head.layers.push_back(detail::make_linear<Scalar>(cin, num_classes, true, rng));
  net.modules.push_back(std::move(head));
  return net;
}

// Encoder-decoder: each encoder conv+relu block is one Sideways module; the
// entire mirrored deconv decoder is a single composite module that takes one
// computation step. D = channels.size() + 1.
template <typename Scalar>
NetworkSpec<Scalar> build_autoencoder(const std::vector<int>& channels,
                                      std::array<int, 3> input_shape,
                                      std::uint64_t seed = 0) {
  if (channels.empty()) throw ShapeError("build_autoencoder: channels empty");
  std::mt19937_64 rng(seed);
  NetworkSpec<Scalar> net;
  net.task = TaskKind::kAutoencoding;
  net.input_shape = input_shape;
  int cin = input_shape[2];
  std::vector<int> strides;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    const int stride = detail::conv_stride_at(i);
    strides.push_back(stride);
    Module<Scalar> m;
    m.layers.push_back(detail::make_conv<Scalar>(3, 3, cin, channels[i], stride, rng));
    Layer<Scalar> relu;
    relu.kind = LayerKind::kRelu;
    m.layers.push_back(relu);
    net.modules.push_back(std::move(m));
    cin = channels[i];
  }
  Module<Scalar> decoder;
  for (int i = static_cast<int>(channels.size()) - 1; i >= 0; --i) {
    const int cout = (i == 0) ? input_shape[2] : channels[i - 1];
    decoder.layers.push_back(
        detail::make_deconv<Scalar>(3, 3, channels[i], cout, strides[i], rng));
    if (i > 0) {
      Layer<Scalar> relu;
      relu.kind = LayerKind::kRelu;
      decoder.layers.push_back(relu);
    }
  }
  net.modules.push_back(std::move(decoder));
  return net;
}

// Plain composed forward, no cache side effects on the caller's network copy
// would matter here; used for evaluation and oracles.
template <typename Scalar>
Tensor<Scalar> network_forward(NetworkSpec<Scalar>& net, const Tensor<Scalar>& x,
                               int origin = 0) {
  Tensor<Scalar> h = x;
  for (auto& m : net.modules) h = module_forward(m, h, origin);
  return h;
}

template <typename Scalar>
std::vector<Tensor<Scalar>*> network_params(NetworkSpec<Scalar>& net) {
  std::vector<Tensor<Scalar>*> out;
  for (auto& m : net.modules)
    for (auto& l : m.layers)
      for (auto& p : l.params) out.push_back(&p);
  return out;
}

template <typename Scalar>
std::int64_t network_param_count(const NetworkSpec<Scalar>& net) {
  std::int64_t n = 0;
  for (const auto& m : net.modules)
    for (const auto& l : m.layers)
      for (const auto& p : l.params) n += p.size();
  return n;
}

}  // namespace sideways
