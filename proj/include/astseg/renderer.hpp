#pragma once

// Rendering: a transpose-conv glimpse generator producing per-object
// appearance o_k and mask m_k, spatial-transformer placement onto the
// canvas by inverse warping, occlusion weights from activation-scaled masks,
// convex compositing, and segmentation extraction.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "astseg/encoder.hpp"
#include "astseg/nn.hpp"

namespace astseg {

struct RendererConfig {
  int64_t glimpse_size = 32;      // g = h/2
  int64_t d_zwhat = 32;
  double alpha0_init_log = 11.0;  // background activation, stored in log space
  // A spatially varying background activation alpha0(i,j) is a recognized
  // variant but is not implemented; only the scalar form is supported.
  bool alpha0_spatial = false;

  void validate() const {
    check_config(glimpse_size >= 4 && (glimpse_size & (glimpse_size - 1)) == 0,
                 "renderer.glimpse_size must be a power of two >= 4");
    check_config(!alpha0_spatial,
                 "renderer.alpha0_spatial is not implemented; use the scalar form");
  }
};

template <typename T>
struct Glimpse {
  Tensor<T> o;  // [B, K, 3, g, g], in [0,1]
  Tensor<T> m;  // [B, K, 1, g, g], in [0,1]
};

template <typename T>
struct SceneDecomposition {
  Tensor<T> layers;     // [B, K+1, 3, h, w], layer 0 is the background
  Tensor<T> masks;      // [B, K+1, 1, h, w], mask 0 identically 1
  Tensor<T> weights;    // [B, K+1, 1, h, w], rows sum to 1 per pixel
  Tensor<T> xhat;       // [B, 3, h, w]
  Tensor<T> alpha_obj;  // [B, K]
  Tensor<T> alpha0;     // scalar
};

// Transpose-conv stack from a 1x1 latent to a g x g 4-channel sigmoid
// output (3 appearance + 1 mask). Channel widths halve from 2*g down to 8,
// then a final 4-channel layer; group sizes follow channels/16.
template <typename T>
class GlimpseGenerator {
 public:
  GlimpseGenerator() = default;

  GlimpseGenerator(ParamStore<T>& store, const std::string& prefix,
                   const RendererConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    std::vector<int64_t> widths;
    for (int64_t c = 2 * cfg.glimpse_size; c >= 8; c /= 2) widths.push_back(c);
    int64_t c_prev = cfg.d_zwhat;
    for (size_t i = 0; i < widths.size(); ++i) {
      const std::string p = prefix + ".t" + std::to_string(i);
      if (i == 0)
        tconvs_.push_back(TransposeConv2dLayer<T>::create(store, p, c_prev, widths[i], 2, 2, 0, rng));
      else
        tconvs_.push_back(TransposeConv2dLayer<T>::create(store, p, c_prev, widths[i], 4, 2, 1, rng));
      norms_.push_back(Norm2dLayer<T>::create(store, p + ".norm", widths[i], false,
                                              std::max<int64_t>(1, widths[i] / 16)));
      c_prev = widths[i];
    }
    out_ = TransposeConv2dLayer<T>::create(store, prefix + ".out", c_prev, 4, 4, 2, 1, rng);
  }

  const RendererConfig& config() const { return cfg_; }

  Glimpse<T> generate(const Tensor<T>& z_what, bool training) const {
    check(z_what.ndim() == 3 && z_what.size(2) == cfg_.d_zwhat,
          "glimpse generator expects z_what [B,K," + std::to_string(cfg_.d_zwhat) + "]");
    const int64_t b = z_what.size(0), k = z_what.size(1);
    Tensor<T> x = reshape(z_what, {b * k, cfg_.d_zwhat, 1, 1});
    for (size_t i = 0; i < tconvs_.size(); ++i)
      x = celu(norms_[i].forward(tconvs_[i].forward(x), training));
    x = sigmoid(out_.forward(x));
    const int64_t g = x.size(2);
    check(g == cfg_.glimpse_size, "glimpse output size mismatch");
    Tensor<T> stacked = reshape(x, {b, k, 4, g, g});
    Glimpse<T> gl;
    gl.o = narrow(stacked, 2, 0, 3);
    gl.m = narrow(stacked, 2, 3, 1);
    return gl;
  }

 private:
  RendererConfig cfg_;
  std::vector<TransposeConv2dLayer<T>> tconvs_;
  std::vector<Norm2dLayer<T>> norms_;
  TransposeConv2dLayer<T> out_;
};

// Inverse-warp placement: canvas pixel at normalized (a,b) samples the
// glimpse at ((a-x)*s_x, (b-y)*s_y), zero outside. Differentiable in the
// glimpse and in (x, y, s). s is [B,K,1] (isotropic) or [B,K,2] with
// (s_x, s_y).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> place_layers(const Tensor<T>& o, const Tensor<T>& m,
                                             const Tensor<T>& x, const Tensor<T>& y,
                                             const Tensor<T>& s, int64_t canvas_h,
                                             int64_t canvas_w) {
  const int64_t b = o.size(0), k = o.size(1), g = o.size(3);
  check(m.size(0) == b && m.size(1) == k && m.size(3) == g, "place_layers shape mismatch");
  check(s.ndim() == 3 && (s.size(2) == 1 || s.size(2) == 2),
        "place_layers: s must be [B,K,1] or [B,K,2]");

  std::vector<T> ax(static_cast<size_t>(canvas_h * canvas_w));
  std::vector<T> ay(static_cast<size_t>(canvas_h * canvas_w));
  for (int64_t j = 0; j < canvas_h; ++j)
    for (int64_t i = 0; i < canvas_w; ++i) {
      ax[static_cast<size_t>(j * canvas_w + i)] =
          static_cast<T>(2.0 * static_cast<double>(i) / static_cast<double>(canvas_w - 1) - 1.0);
      ay[static_cast<size_t>(j * canvas_w + i)] =
          static_cast<T>(2.0 * static_cast<double>(j) / static_cast<double>(canvas_h - 1) - 1.0);
    }
  Tensor<T> at = Tensor<T>::from_data({1, 1, canvas_h, canvas_w}, std::move(ax));
  Tensor<T> bt = Tensor<T>::from_data({1, 1, canvas_h, canvas_w}, std::move(ay));

  Tensor<T> sx = reshape(narrow(s, 2, 0, 1), {b, k, 1, 1});
  Tensor<T> sy = s.size(2) == 2 ? reshape(narrow(s, 2, 1, 1), {b, k, 1, 1}) : sx;
  Tensor<T> x4 = reshape(x, {b, k, 1, 1});
  Tensor<T> y4 = reshape(y, {b, k, 1, 1});

  Tensor<T> gx = reshape(mul(sub(at, x4), sx), {b * k, canvas_h, canvas_w});
  Tensor<T> gy = reshape(mul(sub(bt, y4), sy), {b * k, canvas_h, canvas_w});

  Tensor<T> src = reshape(concat<T>({o, m}, 2), {b * k, 4, g, g});
  Tensor<T> placed = grid_sample(src, gx, gy);  // [B*K, 4, h, w]
  Tensor<T> stacked = reshape(placed, {b, k, 4, canvas_h, canvas_w});
  return {narrow(stacked, 2, 0, 3), narrow(stacked, 2, 3, 1)};
}

// Occlusion weights and convex combination of layers.
// w_k = alpha_k M_k / sum_k' alpha_k' M_k', with M_0 = 1 and the scalar
// alpha0; the denominator is bounded below by alpha0 > 0.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> composite(const Tensor<T>& layers,
                                          const Tensor<T>& obj_masks,
                                          const Tensor<T>& alpha_obj,
                                          const Tensor<T>& alpha0) {
  check(layers.ndim() == 5 && obj_masks.ndim() == 5, "composite expects 5-D stacks");
  const int64_t b = layers.size(0), kp1 = layers.size(1);
  const int64_t h = layers.size(3), w = layers.size(4);
  check(obj_masks.size(1) == kp1 - 1, "composite: need K object masks for K+1 layers");
  check(alpha0.numel() == 1, "composite: alpha0 must be scalar");
  check(alpha0.value()[0] > T(0), "composite: alpha0 must be positive");
  for (T a : alpha_obj.value())
    check(a > T(0), "composite: object activations must be positive");

  const int64_t k = kp1 - 1;
  Tensor<T> m0 = Tensor<T>::filled({b, 1, 1, h, w}, T(1));
  Tensor<T> am0 = mul(m0, reshape(alpha0, {1, 1, 1, 1, 1}));
  Tensor<T> amk = mul(obj_masks, reshape(alpha_obj, {b, k, 1, 1, 1}));
  Tensor<T> am = concat<T>({am0, amk}, 1);            // [B,K+1,1,h,w]
  Tensor<T> denom = sum(am, {1}, /*keepdim=*/true);   // [B,1,1,h,w]
  Tensor<T> weights = divide(am, denom);
  Tensor<T> xhat = sum(mul(weights, layers), {1});    // [B,3,h,w]
  return {weights, xhat};
}

// argmax over the layer axis; exact ties resolve to the lowest index.
template <typename T>
std::vector<uint8_t> extract_segmentation(const Tensor<T>& weights) {
  check(weights.ndim() == 5 && weights.size(2) == 1,
        "extract_segmentation expects [B,K+1,1,h,w]");
  const int64_t b = weights.size(0), kp1 = weights.size(1);
  const int64_t h = weights.size(3), w = weights.size(4);
  std::vector<uint8_t> labels(static_cast<size_t>(b * h * w), 0);
  const auto& wv = weights.value();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t p = 0; p < h * w; ++p) {
      T best = wv[static_cast<size_t>((i * kp1) * h * w + p)];
      uint8_t arg = 0;
      for (int64_t kk = 1; kk < kp1; ++kk) {
        const T v = wv[static_cast<size_t>((i * kp1 + kk) * h * w + p)];
        if (v > best) {
          best = v;
          arg = static_cast<uint8_t>(kk);
        }
      }
      labels[static_cast<size_t>(i * h * w + p)] = arg;
    }
  return labels;
}

// Full rendering pass from latents and a background image.
template <typename T>
SceneDecomposition<T> render(const GlimpseGenerator<T>& glimpse,
                             const ObjectLatents<T>& latents,
                             const Tensor<T>& background,
                             const Tensor<T>& alpha0_log, bool training) {
  check(background.ndim() == 4 && background.size(1) == 3,
        "render: background must be [B,3,h,w]");
  const int64_t b = background.size(0), h = background.size(2), w = background.size(3);
  const int64_t k = latents.x.size(1);

  Glimpse<T> gl = glimpse.generate(latents.z_what, training);
  auto [obj_layers, obj_masks] =
      place_layers(gl.o, gl.m, latents.x, latents.y, latents.s, h, w);

  Tensor<T> bg_layer = reshape(background, {b, 1, 3, h, w});
  Tensor<T> layers = concat<T>({bg_layer, obj_layers}, 1);
  Tensor<T> alpha0 = exp(reshape(alpha0_log, {1}));
  auto [weights, xhat] = composite(layers, obj_masks, latents.alpha, alpha0);

  SceneDecomposition<T> scene;
  scene.layers = layers;
  scene.masks = concat<T>({Tensor<T>::filled({b, 1, 1, h, w}, T(1)), obj_masks}, 1);
  scene.weights = weights;
  scene.xhat = xhat;
  scene.alpha_obj = latents.alpha;
  scene.alpha0 = alpha0;
  return scene;
}

}  // namespace astseg
