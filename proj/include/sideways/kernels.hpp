#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <utility>

#include "sideways/tensor.hpp"

// Forward kernels and their hand-written vector-Jacobian products.
// Convolutions go through im2col + Eigen matrix products; everything else is
// an Eigen expression or a short loop. All kernels are pure functions.

namespace sideways {

enum class Padding { kSame, kValid };

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  int out_h = 0, out_w = 0;
  int pad_top = 0, pad_left = 0;
};

// `same` pads with zeros symmetrically, extra pixel on the high side when odd.
inline ConvGeometry conv_geometry(int h, int w, int kh, int kw, int stride,
                                  Padding padding) {
  ConvGeometry g;
  if (padding == Padding::kSame) {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    int pad_h = std::max((g.out_h - 1) * stride + kh - h, 0);
    int pad_w = std::max((g.out_w - 1) * stride + kw - w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  } else {
    if (h < kh || w < kw) {
      throw ShapeError("valid conv: input " + std::to_string(h) + "x" +
                       std::to_string(w) + " smaller than kernel");
    }
    g.out_h = (h - kh) / stride + 1;
    g.out_w = (w - kw) / stride + 1;
  }
  return g;
}

namespace detail {

template <typename Scalar>
void check_conv_args(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                     int stride) {
  if (input.rank() != 3) {
    throw ShapeError("conv input must be rank 3 [H,W,Cin], got " + input.shape_str());
  }
  if (kernel.rank() != 4) {
    throw ShapeError("conv kernel must be rank 4 [kh,kw,Cin,Cout], got " +
                     kernel.shape_str());
  }
  if (kernel.dim(2) != input.dim(2)) {
    throw ShapeError("conv channel axis mismatch: input Cin=" +
                     std::to_string(input.dim(2)) + " vs kernel Cin=" +
                     std::to_string(kernel.dim(2)));
  }
  if (stride < 1) throw ShapeError("conv stride must be >= 1");
}

// Rows: output positions (oh*out_w+ow); cols: (u*kw+v)*cin+c, matching the
// row-major flattening of the kernel's first three axes.
template <typename Scalar>
MatX<Scalar> im2col(const Tensor<Scalar>& input, int kh, int kw, int stride,
                    const ConvGeometry& g) {
  const int h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  MatX<Scalar> cols = MatX<Scalar>::Zero(g.out_h * g.out_w, kh * kw * cin);
  for (int oh = 0; oh < g.out_h; ++oh) {
    for (int ow = 0; ow < g.out_w; ++ow) {
      const int row = oh * g.out_w + ow;
      for (int u = 0; u < kh; ++u) {
        const int ih = oh * stride + u - g.pad_top;
        if (ih < 0 || ih >= h) continue;
        for (int v = 0; v < kw; ++v) {
          const int iw = ow * stride + v - g.pad_left;
          if (iw < 0 || iw >= w) continue;
          for (int c = 0; c < cin; ++c) {
            cols(row, (u * kw + v) * cin + c) = input.at(ih, iw, c);
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col: scatter-add patch columns back onto the image grid.
template <typename Scalar>
Tensor<Scalar> col2im(const MatX<Scalar>& cols, int h, int w, int cin, int kh,
                      int kw, int stride, const ConvGeometry& g) {
  Tensor<Scalar> image({h, w, cin});
  for (int oh = 0; oh < g.out_h; ++oh) {
    for (int ow = 0; ow < g.out_w; ++ow) {
      const int row = oh * g.out_w + ow;
      for (int u = 0; u < kh; ++u) {
        const int ih = oh * stride + u - g.pad_top;
        if (ih < 0 || ih >= h) continue;
        for (int v = 0; v < kw; ++v) {
          const int iw = ow * stride + v - g.pad_left;
          if (iw < 0 || iw >= w) continue;
          for (int c = 0; c < cin; ++c) {
            image.at(ih, iw, c) += cols(row, (u * kw + v) * cin + c);
          }
        }
      }
    }
  }
  return image;
}

}  // namespace detail

// Cross-correlation of input [H,W,Cin] with kernel [kh,kw,Cin,Cout].
template <typename Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& input,
                              const Tensor<Scalar>& kernel, int stride,
                              Padding padding) {
  detail::check_conv_args(input, kernel, stride);
  const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  const ConvGeometry g =
      conv_geometry(input.dim(0), input.dim(1), kh, kw, stride, padding);
  MatX<Scalar> cols = detail::im2col(input, kh, kw, stride, g);
  Eigen::Map<const MatX<Scalar>> kmat(kernel.data(), kh * kw * kernel.dim(2), cout);
  MatX<Scalar> out = cols * kmat;
  Tensor<Scalar> result({g.out_h, g.out_w, cout});
  Eigen::Map<MatX<Scalar>>(result.data(), g.out_h * g.out_w, cout) = out;
  require_finite(result, "conv2d_forward");
  return result;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> conv2d_vjp(const Tensor<Scalar>& input,
                                                     const Tensor<Scalar>& kernel,
                                                     const Tensor<Scalar>& upstream,
                                                     int stride, Padding padding) {
  detail::check_conv_args(input, kernel, stride);
  const int kh = kernel.dim(0), kw = kernel.dim(1);
  const int cin = kernel.dim(2), cout = kernel.dim(3);
  const ConvGeometry g =
      conv_geometry(input.dim(0), input.dim(1), kh, kw, stride, padding);
  require_shape(upstream, {g.out_h, g.out_w, cout}, "conv upstream");

  MatX<Scalar> cols = detail::im2col(input, kh, kw, stride, g);
  Eigen::Map<const MatX<Scalar>> up(upstream.data(), g.out_h * g.out_w, cout);
  Eigen::Map<const MatX<Scalar>> kmat(kernel.data(), kh * kw * cin, cout);

  Tensor<Scalar> grad_kernel(kernel.shape());
  Eigen::Map<MatX<Scalar>>(grad_kernel.data(), kh * kw * cin, cout) =
      cols.transpose() * up;

  MatX<Scalar> grad_cols = up * kmat.transpose();
  Tensor<Scalar> grad_input = detail::col2im(grad_cols, input.dim(0), input.dim(1),
                                             cin, kh, kw, stride, g);
  require_finite(grad_input, "conv2d_vjp grad_input");
  require_finite(grad_kernel, "conv2d_vjp grad_kernel");
  return {std::move(grad_input), std::move(grad_kernel)};
}

// Transposed convolution; input [H,W,Cin], kernel [kh,kw,Cout,Cin], output
// [H*stride, W*stride, Cout] for `same`. Exactly the adjoint of the conv2d
// that maps [H*stride, W*stride, Cout] -> [H,W,Cin], so it inverts conv2d's
// shape map for matching stride/padding.
template <typename Scalar>
Tensor<Scalar> deconv2d_forward(const Tensor<Scalar>& input,
                                const Tensor<Scalar>& kernel, int stride,
                                Padding padding) {
  if (input.rank() != 3) {
    throw ShapeError("deconv input must be rank 3 [H,W,Cin], got " +
                     input.shape_str());
  }
  if (kernel.rank() != 4) {
    throw ShapeError("deconv kernel must be rank 4 [kh,kw,Cout,Cin], got " +
                     kernel.shape_str());
  }
  if (kernel.dim(3) != input.dim(2)) {
    throw ShapeError("deconv channel axis mismatch: input Cin=" +
                     std::to_string(input.dim(2)) + " vs kernel Cin=" +
                     std::to_string(kernel.dim(3)));
  }
  const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(2);
  const int cin = kernel.dim(3);
  int out_h, out_w;
  if (padding == Padding::kSame) {
    out_h = input.dim(0) * stride;
    out_w = input.dim(1) * stride;
  } else {
    out_h = (input.dim(0) - 1) * stride + kh;
    out_w = (input.dim(1) - 1) * stride + kw;
  }
  const ConvGeometry g = conv_geometry(out_h, out_w, kh, kw, stride, padding);
  if (g.out_h != input.dim(0) || g.out_w != input.dim(1)) {
    throw ShapeError("deconv shape map not invertible for input " +
                     input.shape_str());
  }
  Eigen::Map<const MatX<Scalar>> up(input.data(), g.out_h * g.out_w, cin);
  Eigen::Map<const MatX<Scalar>> kmat(kernel.data(), kh * kw * cout, cin);
  MatX<Scalar> grad_cols = up * kmat.transpose();
  Tensor<Scalar> result =
      detail::col2im(grad_cols, out_h, out_w, cout, kh, kw, stride, g);
  require_finite(result, "deconv2d_forward");
  return result;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> deconv2d_vjp(
    const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
    const Tensor<Scalar>& upstream, int stride, Padding padding) {
  const int kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(2);
  const int cin = kernel.dim(3);
  int out_h, out_w;
  if (padding == Padding::kSame) {
    out_h = input.dim(0) * stride;
    out_w = input.dim(1) * stride;
  } else {
    out_h = (input.dim(0) - 1) * stride + kh;
    out_w = (input.dim(1) - 1) * stride + kw;
  }
  require_shape(upstream, {out_h, out_w, cout}, "deconv upstream");
  const ConvGeometry g = conv_geometry(out_h, out_w, kh, kw, stride, padding);

  // grad w.r.t. input: the adjoint of the adjoint, i.e. the forward conv.
  MatX<Scalar> cols = detail::im2col(upstream, kh, kw, stride, g);
  Eigen::Map<const MatX<Scalar>> kmat(kernel.data(), kh * kw * cout, cin);
  Tensor<Scalar> grad_input(input.shape());
  Eigen::Map<MatX<Scalar>>(grad_input.data(), g.out_h * g.out_w, cin) =
      cols * kmat;

  Eigen::Map<const MatX<Scalar>> in_mat(input.data(), g.out_h * g.out_w, cin);
  Tensor<Scalar> grad_kernel(kernel.shape());
  Eigen::Map<MatX<Scalar>>(grad_kernel.data(), kh * kw * cout, cin) =
      cols.transpose() * in_mat;
  require_finite(grad_input, "deconv2d_vjp grad_input");
  require_finite(grad_kernel, "deconv2d_vjp grad_kernel");
  return {std::move(grad_input), std::move(grad_kernel)};
}

// Elementwise max(0, x); subgradient at exactly 0 is 0.
template <typename Scalar>
Tensor<Scalar> relu_forward(const Tensor<Scalar>& input) {
  Tensor<Scalar> out(input.shape());
  out.vec() = input.vec().cwiseMax(Scalar(0));
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu_vjp(const Tensor<Scalar>& input, const Tensor<Scalar>& upstream) {
  if (!input.same_shape(upstream)) {
    throw ShapeError("relu upstream shape " + upstream.shape_str() +
                     " differs from input " + input.shape_str());
  }
  Tensor<Scalar> grad(input.shape());
  for (std::int64_t i = 0; i < input.size(); ++i) {
    grad[i] = input[i] > Scalar(0) ? upstream[i] : Scalar(0);
  }
  return grad;
}

// Spatial mean over H and W: [H,W,C] -> [C].
template <typename Scalar>
Tensor<Scalar> global_avg_pool_forward(const Tensor<Scalar>& input) {
  if (input.rank() != 3) {
    throw ShapeError("global_avg_pool input must be rank 3, got " +
                     input.shape_str());
  }
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  Tensor<Scalar> out({c});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < c; ++k) out[k] += input.at(i, j, k);
  out.vec() /= Scalar(h * w);
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_avg_pool_vjp(const Tensor<Scalar>& input,
                                   const Tensor<Scalar>& upstream) {
  require_shape(upstream, {input.dim(2)}, "global_avg_pool upstream");
  const int h = input.dim(0), w = input.dim(1), c = input.dim(2);
  Tensor<Scalar> grad(input.shape());
  const Scalar inv = Scalar(1) / Scalar(h * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < c; ++k) grad.at(i, j, k) = upstream[k] * inv;
  return grad;
}

// Affine map y = W x (+ b); weight [out,in], optional bias [out].
// Input of any rank is treated as a flat vector.
template <typename Scalar>
Tensor<Scalar> linear_forward(const Tensor<Scalar>& input,
                              const Tensor<Scalar>& weight,
                              const Tensor<Scalar>* bias) {
  if (weight.rank() != 2) {
    throw ShapeError("linear weight must be rank 2 [out,in], got " +
                     weight.shape_str());
  }
  if (weight.dim(1) != input.size()) {
    throw ShapeError("linear input axis mismatch: weight expects " +
                     std::to_string(weight.dim(1)) + " inputs, got " +
                     std::to_string(input.size()));
  }
  Tensor<Scalar> out({weight.dim(0)});
  Eigen::Map<const MatX<Scalar>> w(weight.data(), weight.dim(0), weight.dim(1));
  out.vec() = w * input.vec();
  if (bias) {
    require_shape(*bias, {weight.dim(0)}, "linear bias");
    out.vec() += bias->vec();
  }
  require_finite(out, "linear_forward");
  return out;
}

template <typename Scalar>
struct LinearGrads {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;  // empty when the layer has no bias
  Tensor<Scalar> input;
};

template <typename Scalar>
LinearGrads<Scalar> linear_vjp(const Tensor<Scalar>& input,
                               const Tensor<Scalar>& weight,
                               const Tensor<Scalar>* bias,
                               const Tensor<Scalar>& upstream) {
  require_shape(upstream, {weight.dim(0)}, "linear upstream");
  LinearGrads<Scalar> g;
  g.weight = Tensor<Scalar>(weight.shape());
  Eigen::Map<const MatX<Scalar>> w(weight.data(), weight.dim(0), weight.dim(1));
  Eigen::Map<MatX<Scalar>> gw(g.weight.data(), weight.dim(0), weight.dim(1));
  gw = upstream.vec() * input.vec().transpose();
  if (bias) {
    g.bias = Tensor<Scalar>(bias->shape());
    g.bias.vec() = upstream.vec();
  }
  g.input = Tensor<Scalar>(input.shape());
  g.input.vec() = w.transpose() * upstream.vec();
  return g;
}

// Softmax cross-entropy with log-sum-exp stabilization;
// grad_logits = softmax(logits) - onehot(label).
template <typename Scalar>
std::pair<double, Tensor<Scalar>> softmax_xent(const Tensor<Scalar>& logits,
                                               int label) {
  require_finite(logits, "softmax_xent logits");
  const std::int64_t n = logits.size();
  if (label < 0 || label >= n) {
    throw std::out_of_range("softmax_xent label " + std::to_string(label) +
                            " out of range [0," + std::to_string(n) + ")");
  }
  const Scalar m = logits.vec().maxCoeff();
  double sum = 0;
  for (std::int64_t i = 0; i < n; ++i) sum += std::exp(double(logits[i] - m));
  const double log_z = std::log(sum) + double(m);
  const double loss = log_z - double(logits[label]);
  Tensor<Scalar> grad(logits.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    grad[i] = static_cast<Scalar>(std::exp(double(logits[i]) - log_z));
  }
  grad[label] -= Scalar(1);
  return {loss, std::move(grad)};
}

// Mean squared error; grad_pred = 2 (pred - target) / N.
template <typename Scalar>
std::pair<double, Tensor<Scalar>> mse(const Tensor<Scalar>& pred,
                                      const Tensor<Scalar>& target) {
  if (!pred.same_shape(target)) {
    throw ShapeError("mse target shape " + target.shape_str() +
                     " differs from pred " + pred.shape_str());
  }
  Tensor<Scalar> grad(pred.shape());
  grad.vec() = pred.vec() - target.vec();
  const double loss = double(grad.vec().squaredNorm()) / double(pred.size());
  grad.vec() *= Scalar(2) / Scalar(pred.size());
  return {loss, std::move(grad)};
}

}  // namespace sideways
