#pragma once

// Synthetic multi-sprite scene generator with exact instance labels.
// Scenes are a deterministic function of (seed, index): sprite geometry is
// rasterized in double with 4x4 supersampling, painted back-to-front, and
// quantized to 8 bits at the end so that PNG round-trips are lossless.
// Ground-truth labels use draw order (later sprites occlude earlier ones)
// with hard assignment where a sprite covers more than half a pixel.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "astseg/common.hpp"
#include "astseg/rng.hpp"

namespace astseg {

enum class SpriteShape { disc, square, triangle };
enum class BackgroundMode { solid, gradient, fixed };

struct SceneSpec {
  int64_t image_size = 64;
  int64_t max_objects = 3;
  std::vector<SpriteShape> shapes = {SpriteShape::disc, SpriteShape::square,
                                     SpriteShape::triangle};
  double min_size = 0.18, max_size = 0.32;  // sprite diameter as image fraction
  BackgroundMode background = BackgroundMode::fixed;
  bool occlusion = true;
  uint64_t seed = 1;

  void validate() const {
    check_config(image_size >= 16, "data.image_size must be >= 16");
    check_config(max_objects >= 1 && max_objects <= 254, "data.max_objects out of range");
    check_config(!shapes.empty(), "data.shapes must not be empty");
    check_config(min_size > 0.0 && max_size < 1.0 && min_size <= max_size,
                 "data.size_range invalid");
  }
};

struct LabeledScene {
  int64_t h = 0, w = 0;
  std::vector<float> image;    // [3,h,w] CHW, values k/255
  std::vector<uint8_t> labels; // [h,w], 0 = background, 1..n instances
};

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

struct SpriteInstance {
  SpriteShape shape = SpriteShape::disc;
  double cx, cy;   // pixels
  double r;        // bounding radius, pixels
  double rot;
  double rgb[3];

  bool inside(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    switch (shape) {
      case SpriteShape::disc:
        return dx * dx + dy * dy <= r * r;
      case SpriteShape::square: {
        const double cs = std::cos(-rot), sn = std::sin(-rot);
        const double ux = dx * cs - dy * sn, uy = dx * sn + dy * cs;
        const double a = r / std::sqrt(2.0);  // half side from circumradius
        return std::abs(ux) <= a && std::abs(uy) <= a;
      }
      case SpriteShape::triangle: {
        double vx[3], vy[3];
        for (int i = 0; i < 3; ++i) {
          const double ang = rot + 2.0943951023931953 * i;  // 2*pi/3
          vx[i] = cx + r * std::cos(ang);
          vy[i] = cy + r * std::sin(ang);
        }
        bool neg = false, pos = false;
        for (int i = 0; i < 3; ++i) {
          const int j = (i + 1) % 3;
          const double cr = (vx[j] - vx[i]) * (y - vy[i]) - (vy[j] - vy[i]) * (x - vx[i]);
          neg = neg || cr < 0;
          pos = pos || cr > 0;
        }
        return !(neg && pos);
      }
    }
    return false;
  }

  // fraction of the sprite's area lying inside the canvas, on a fixed grid
  double inside_canvas_fraction(int64_t size) const {
    const int n = 24;
    int total = 0, in_frame = 0;
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const double x = cx - r + 2.0 * r * (i + 0.5) / n;
        const double y = cy - r + 2.0 * r * (j + 0.5) / n;
        if (!inside(x, y)) continue;
        ++total;
        if (x >= 0.0 && x < static_cast<double>(size) && y >= 0.0 &&
            y < static_cast<double>(size))
          ++in_frame;
      }
    return total == 0 ? 0.0 : static_cast<double>(in_frame) / total;
  }
};

// When `instances_out` is given it receives the placed sprite geometry in
// draw order (useful for tests and debugging overlays).
inline LabeledScene generate_scene(const SceneSpec& spec, int64_t index,
                                   std::vector<SpriteInstance>* instances_out = nullptr) {
  spec.validate();
  const int64_t size = spec.image_size;
  Rng rng(mix_seed(spec.seed, static_cast<uint64_t>(index)));

  // background
  std::vector<double> canvas(static_cast<size_t>(3 * size * size));
  {
    double c0[3], c1[3];
    if (spec.background == BackgroundMode::fixed) {
      Rng brng(mix_seed(spec.seed, 0xb6u));  // same for every index
      const double u = brng.uniform();
      hsv_to_rgb(u, brng.uniform(0.0, 0.15), brng.uniform(0.18, 0.35), c0);
      c1[0] = c0[0]; c1[1] = c0[1]; c1[2] = c0[2];
    } else {
      hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.3), rng.uniform(0.1, 0.45), c0);
      if (spec.background == BackgroundMode::gradient)
        hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.3), rng.uniform(0.1, 0.45), c1);
      else {
        c1[0] = c0[0]; c1[1] = c0[1]; c1[2] = c0[2];
      }
    }
    for (int64_t j = 0; j < size; ++j) {
      const double t = size > 1 ? static_cast<double>(j) / (size - 1) : 0.0;
      for (int64_t i = 0; i < size; ++i)
        for (int c = 0; c < 3; ++c)
          canvas[static_cast<size_t>(c * size * size + j * size + i)] =
              (1.0 - t) * c0[c] + t * c1[c];
    }
  }

  // sprites
  const int64_t count = rng.randint(1, spec.max_objects + 1);
  std::vector<SpriteInstance> sprites;
  for (int64_t k = 0; k < count; ++k) {
    SpriteInstance sp;
    bool placed = false;
    for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
      sp.shape = spec.shapes[static_cast<size_t>(rng.randint(
          0, static_cast<int64_t>(spec.shapes.size())))];
      const double frac = rng.uniform(spec.min_size, spec.max_size);
      sp.r = frac * static_cast<double>(size) / 2.0;
      sp.cx = rng.uniform(0.0, static_cast<double>(size));
      sp.cy = rng.uniform(0.0, static_cast<double>(size));
      sp.rot = rng.uniform(0.0, 6.283185307179586);
      if (sp.inside_canvas_fraction(size) < 0.6) continue;
      if (!spec.occlusion) {
        bool overlaps = false;
        for (const auto& other : sprites) {
          const double dx = sp.cx - other.cx, dy = sp.cy - other.cy;
          const double lim = sp.r + other.r + 1.0;
          if (dx * dx + dy * dy < lim * lim) overlaps = true;
        }
        if (overlaps) continue;
      }
      placed = true;
    }
    check(placed, "sprite placement failed; spec too constrained");
    hsv_to_rgb(rng.uniform(), rng.uniform(0.8, 1.0), rng.uniform(0.85, 1.0),
                       sp.rgb);
    sprites.push_back(sp);
  }

  // paint back-to-front with supersampled coverage; label by coverage > 0.5
  LabeledScene scene;
  scene.h = size;
  scene.w = size;
  scene.labels.assign(static_cast<size_t>(size * size), 0);
  for (size_t k = 0; k < sprites.size(); ++k) {
    const auto& sp = sprites[k];
    const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(sp.cx - sp.r - 1)));
    const int64_t x1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(sp.cx + sp.r + 1)));
    const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(sp.cy - sp.r - 1)));
    const int64_t y1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(sp.cy + sp.r + 1)));
    for (int64_t j = y0; j <= y1; ++j)
      for (int64_t i = x0; i <= x1; ++i) {
        int hits = 0;
        for (int sj = 0; sj < 4; ++sj)
          for (int si = 0; si < 4; ++si)
            if (sp.inside(i + (si + 0.5) / 4.0, j + (sj + 0.5) / 4.0)) ++hits;
        if (hits == 0) continue;
        const double cov = hits / 16.0;
        for (int c = 0; c < 3; ++c) {
          auto& px = canvas[static_cast<size_t>(c * size * size + j * size + i)];
          px = (1.0 - cov) * px + cov * sp.rgb[c];
        }
        if (cov > 0.5)
          scene.labels[static_cast<size_t>(j * size + i)] = static_cast<uint8_t>(k + 1);
      }
  }

  if (instances_out) *instances_out = sprites;

  scene.image.resize(canvas.size());
  for (size_t i = 0; i < canvas.size(); ++i) {
    const double q = std::round(std::clamp(canvas[i], 0.0, 1.0) * 255.0);
    scene.image[i] = static_cast<float>(q / 255.0);
  }
  return scene;
}

}  // namespace astseg
