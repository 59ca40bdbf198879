#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sideways/tensor.hpp"

// Synthetic smooth-video generation: simple sprites (squares and discs)
// translating at a controllable per-step displacement, which is the
// smoothness knob. Plus stride subsampling, torus padding, and the binary
// clip file format.

namespace sideways {

class ClipFormatError : public std::runtime_error {
 public:
  explicit ClipFormatError(const std::string& what) : std::runtime_error(what) {}
};

template <typename Scalar>
struct Clip {
  std::vector<Tensor<Scalar>> frames;  // [H,W,C] each, values in [0,1]
  std::optional<int> label;
  std::uint64_t seed = 0;

  int length() const { return static_cast<int>(frames.size()); }
};

enum class SpriteShape { kSquare, kDisc };
enum class ClassRule { kMotionDirection4, kShapeClass };

struct SpriteSceneSpec {
  int n_sprites = 1;
  double delta = 1.0;  // pixels per step; 0 gives the constant-clip fixture
  double min_size = 3.0;
  double max_size = 6.0;
  ClassRule rule = ClassRule::kMotionDirection4;
  bool allow_discs = true;
};

namespace detail {

struct Sprite {
  SpriteShape shape;
  double cx, cy;
  double vx, vy;  // unit direction, scaled by delta per step
  double half;    // half-size / radius
  std::vector<double> color;
};

// Soft-edged rasterization so sub-pixel motion changes pixels smoothly.
template <typename Scalar>
void raster_sprite(Tensor<Scalar>& frame, const Sprite& s) {
  const int h = frame.dim(0), w = frame.dim(1), c = frame.dim(2);
  const int y0 = std::max(0, int(std::floor(s.cy - s.half - 1)));
  const int y1 = std::min(h - 1, int(std::ceil(s.cy + s.half + 1)));
  const int x0 = std::max(0, int(std::floor(s.cx - s.half - 1)));
  const int x1 = std::min(w - 1, int(std::ceil(s.cx + s.half + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      double dist;
      if (s.shape == SpriteShape::kSquare) {
        dist = std::max(std::abs(y - s.cy), std::abs(x - s.cx)) - s.half;
      } else {
        dist = std::hypot(y - s.cy, x - s.cx) - s.half;
      }
      const double cov = std::clamp(0.5 - dist, 0.0, 1.0);
      if (cov <= 0) continue;
      for (int ch = 0; ch < c; ++ch) {
        const double v = double(frame.at(y, x, ch)) + cov * s.color[ch % s.color.size()];
        frame.at(y, x, ch) = static_cast<Scalar>(std::min(v, 1.0));
      }
    }
  }
}

}  // namespace detail

// Deterministic given the seed. All sprites share one of four axis-aligned
// motion directions (0:right, 1:up, 2:left, 3:down), which is the label
// under the motion-direction rule; under the shape rule the label is the
// first sprite's shape. Sprites bounce off frame edges.
template <typename Scalar>
Clip<Scalar> generate_clip(const SpriteSceneSpec& spec, int k, int h, int w, int c,
                           std::uint64_t seed) {
  if (spec.max_size >= std::min(h, w)) {
    throw ShapeError("sprite size " + std::to_string(spec.max_size) +
                     " does not fit a " + std::to_string(h) + "x" +
                     std::to_string(w) + " frame");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int direction = int(rng() % 4);
  const double dirs[4][2] = {{0, 1}, {-1, 0}, {0, -1}, {1, 0}};  // (vy, vx)

  std::vector<detail::Sprite> sprites;
  for (int s = 0; s < spec.n_sprites; ++s) {
    detail::Sprite sp;
    sp.shape = (spec.allow_discs && (rng() % 2 == 0)) ? SpriteShape::kDisc
                                                      : SpriteShape::kSquare;
    sp.half = 0.5 * (spec.min_size + u01(rng) * (spec.max_size - spec.min_size));
    sp.cy = sp.half + u01(rng) * (h - 2 * sp.half);
    sp.cx = sp.half + u01(rng) * (w - 2 * sp.half);
    sp.vy = dirs[direction][0] * spec.delta;
    sp.vx = dirs[direction][1] * spec.delta;
    sp.color.assign({0.4 + 0.6 * u01(rng), 0.4 + 0.6 * u01(rng), 0.4 + 0.6 * u01(rng)});
    sprites.push_back(sp);
  }

  Clip<Scalar> clip;
  clip.seed = seed;
  clip.label = spec.rule == ClassRule::kMotionDirection4
                   ? direction
                   : int(sprites[0].shape);
  for (int t = 0; t < k; ++t) {
    Tensor<Scalar> frame({h, w, c});
    for (const auto& sp : sprites) detail::raster_sprite(frame, sp);
    clip.frames.push_back(std::move(frame));
    for (auto& sp : sprites) {
      sp.cy += sp.vy;
      sp.cx += sp.vx;
      // reflective bounce keeps sprites in frame
      if (sp.cy < sp.half) { sp.cy = 2 * sp.half - sp.cy; sp.vy = -sp.vy; }
      if (sp.cy > h - sp.half) { sp.cy = 2 * (h - sp.half) - sp.cy; sp.vy = -sp.vy; }
      if (sp.cx < sp.half) { sp.cx = 2 * sp.half - sp.cx; sp.vx = -sp.vx; }
      if (sp.cx > w - sp.half) { sp.cx = 2 * (w - sp.half) - sp.cx; sp.vx = -sp.vx; }
    }
  }
  return clip;
}

// Mean per-pixel absolute inter-frame difference; monotone in delta on
// average (the smoothness knob).
template <typename Scalar>
double mean_interframe_diff(const Clip<Scalar>& clip) {
  if (clip.length() < 2) return 0;
  double total = 0;
  for (int t = 1; t < clip.length(); ++t) {
    total += double((clip.frames[t].vec() - clip.frames[t - 1].vec())
                        .cwiseAbs()
                        .sum()) /
             double(clip.frames[t].size());
  }
  return total / (clip.length() - 1);
}

// Skip k frames with striding k+1: frames 1, k+2, 2k+3, ... (1-based).
template <typename Scalar>
Clip<Scalar> stride_subsample(const Clip<Scalar>& clip, int k) {
  if (k < 0) throw std::invalid_argument("stride_subsample: k must be >= 0");
  Clip<Scalar> out;
  out.label = clip.label;
  out.seed = clip.seed;
  for (int t = 0; t < clip.length(); t += k + 1) {
    out.frames.push_back(clip.frames[static_cast<std::size_t>(t)]);
  }
  return out;
}

// Repeat frames cyclically up to target_k.
template <typename Scalar>
Clip<Scalar> torus_pad(const Clip<Scalar>& clip, int target_k) {
  if (target_k < 1) throw std::invalid_argument("torus_pad: target_k must be >= 1");
  Clip<Scalar> out;
  out.label = clip.label;
  out.seed = clip.seed;
  for (int t = 0; t < target_k; ++t) {
    out.frames.push_back(clip.frames[static_cast<std::size_t>(t % clip.length())]);
  }
  return out;
}

// Horizontal flip applied consistently over all frames of a clip.
template <typename Scalar>
Clip<Scalar> hflip_clip(const Clip<Scalar>& clip) {
  Clip<Scalar> out;
  out.label = clip.label;
  out.seed = clip.seed;
  for (const auto& f : clip.frames) {
    Tensor<Scalar> g(f.shape());
    const int h = f.dim(0), w = f.dim(1), c = f.dim(2);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) g.at(y, x, ch) = f.at(y, w - 1 - x, ch);
    out.frames.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clip file format: magic "SWC1", little-endian u32 K,H,W,C, then K*H*W*C
// little-endian 32-bit floats, frame-major, row-major within a frame.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* field) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw ClipFormatError(std::string("truncated header at field ") + field);
  }
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

}  // namespace detail

template <typename Scalar>
void write_clip_file(const std::string& path, const Clip<Scalar>& clip) {
  if (clip.frames.empty()) throw ClipFormatError("cannot write empty clip");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ClipFormatError("cannot open " + path + " for writing");
  os.write("SWC1", 4);
  const auto& s = clip.frames[0].shape();
  detail::put_u32(os, std::uint32_t(clip.length()));
  detail::put_u32(os, std::uint32_t(s[0]));
  detail::put_u32(os, std::uint32_t(s[1]));
  detail::put_u32(os, std::uint32_t(s[2]));
  for (const auto& f : clip.frames) {
    for (std::int64_t i = 0; i < f.size(); ++i) {
      const float v = static_cast<float>(f[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      detail::put_u32(os, bits);
    }
  }
  if (!os) throw ClipFormatError("write failed for " + path);
}

template <typename Scalar>
Clip<Scalar> read_clip_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ClipFormatError("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SWC1", 4) != 0) {
    throw ClipFormatError("bad magic in " + path);
  }
  const std::uint32_t k = detail::get_u32(is, "K");
  const std::uint32_t h = detail::get_u32(is, "H");
  const std::uint32_t w = detail::get_u32(is, "W");
  const std::uint32_t c = detail::get_u32(is, "C");
  if (k == 0 || h == 0 || w == 0 || c == 0 ||
      double(k) * h * w * c > double(1) * (1u << 30)) {
    throw ClipFormatError("implausible clip header K=" + std::to_string(k) +
                          " H=" + std::to_string(h) + " W=" + std::to_string(w) +
                          " C=" + std::to_string(c));
  }
  Clip<Scalar> clip;
  for (std::uint32_t t = 0; t < k; ++t) {
    Tensor<Scalar> f({int(h), int(w), int(c)});
    for (std::int64_t i = 0; i < f.size(); ++i) {
      unsigned char b[4];
      if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw ClipFormatError("truncated payload at frame " + std::to_string(t + 1));
      }
      std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                           (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
      float v;
      std::memcpy(&v, &bits, 4);
      f[i] = static_cast<Scalar>(v);
    }
    clip.frames.push_back(std::move(f));
  }
  return clip;
}

}  // namespace sideways
