#pragma once

// Full model assembly. Encoding runs feature generation, attention
// normalization, soft-argmax localization, attention-weighted feature
// pooling, transformer refinement and latent extraction; rendering places
// glimpses with the spatial transformer and composites them against the
// autoencoded background.

#include <cstdint>
#include <string>

#include "astseg/background.hpp"
#include "astseg/encoder.hpp"
#include "astseg/localization.hpp"
#include "astseg/renderer.hpp"
#include "astseg/unet.hpp"

namespace astseg {

struct ModelConfig {
  int64_t image_h = 64, image_w = 64;
  int64_t slots = 4;
  FeatureGeneratorConfig fg;
  EncoderConfig enc;
  BackgroundConfig bg;
  RendererConfig rend;

  void validate() const {
    check_config(image_h >= 16 && image_w >= 16, "image size too small");
    check_config(fg.input_h == image_h && fg.input_w == image_w,
                 "feature generator size must match the image size");
    check_config(bg.input_h == image_h && bg.input_w == image_w,
                 "background model size must match the image size");
    check_config(fg.slots == slots, "slot count mismatch between modules");
    check_config(fg.d_s == enc.d_s(), "d_s mismatch between feature generator and encoder");
    check_config(fg.d_zwhat == enc.d_zwhat && fg.d_zwhat == rend.d_zwhat,
                 "d_zwhat mismatch between modules");
    check_config(rend.glimpse_size == image_h / 2,
                 "glimpse size must be half the image height");
    fg.validate();
    enc.validate();
    bg.validate();
    rend.validate();
  }
};

template <typename T>
struct EncodeResult {
  FeatureMaps<T> maps;
  Tensor<T> attention;       // [B,K,h*,w*], normalized
  SlotTriplets<T> initial;   // soft-argmax positions + pooled features
  SlotTriplets<T> refined;
  ObjectLatents<T> latents;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(mix_seed(seed, 0xa57u));
    fg_ = FeatureGenerator<T>(store_, "fg", cfg.fg, rng);
    enc_ = SlotEncoder<T>(store_, "enc", cfg.enc, rng);
    glimpse_ = GlimpseGenerator<T>(store_, "glimpse", cfg.rend, rng);
    alpha0_log_ = store_.add("alpha0_log",
                             Tensor<T>::filled({1}, static_cast<T>(cfg.rend.alpha0_init_log)));
    bg_ = BackgroundModel<T>(store_, "bg", cfg.bg, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  BackgroundModel<T>& background() { return bg_; }
  const BackgroundModel<T>& background() const { return bg_; }
  GlimpseGenerator<T>& glimpse() { return glimpse_; }
  SlotEncoder<T>& encoder() { return enc_; }
  FeatureGenerator<T>& feature_generator() { return fg_; }
  Tensor<T> alpha0_log() const { return alpha0_log_; }

  EncodeResult<T> encode(const Tensor<T>& image, bool training,
                         Rng* dropout_rng = nullptr) const {
    EncodeResult<T> r;
    r.maps = fg_.forward(image, training);
    r.attention = normalize_attention(r.maps.logits);
    const auto grid = make_coordinate_grid<T>(cfg_.fg.out_h(), cfg_.fg.out_w());
    auto [x0, y0] = soft_argmax(r.attention, grid);
    r.initial.x = x0;
    r.initial.y = y0;
    r.initial.phi = aggregate_features(r.attention, r.maps.phi);
    r.refined = enc_.refine_slots(r.initial, dropout_rng);
    r.latents = enc_.split_latents(r.refined);
    return r;
  }

  // freeze_bg evaluates the background without recording gradients, so its
  // parameters receive none.
  SceneDecomposition<T> forward(const Tensor<T>& image, bool training,
                                bool freeze_bg, Rng* dropout_rng = nullptr) const {
    Tensor<T> bgimg;
    if (freeze_bg) {
      NoGradGuard ng;
      bgimg = bg_.reconstruct(image, /*training=*/false);
    } else {
      bgimg = bg_.reconstruct(image, training);
    }
    EncodeResult<T> enc = encode(image, training, dropout_rng);
    return render(glimpse_, enc.latents, bgimg, alpha0_log_, training);
  }

  SceneDecomposition<T> forward_with_background(const Tensor<T>& image,
                                                const Tensor<T>& bgimg, bool training,
                                                Rng* dropout_rng = nullptr) const {
    EncodeResult<T> enc = encode(image, training, dropout_rng);
    return render(glimpse_, enc.latents, bgimg, alpha0_log_, training);
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  FeatureGenerator<T> fg_;
  SlotEncoder<T> enc_;
  GlimpseGenerator<T> glimpse_;
  BackgroundModel<T> bg_;
  Tensor<T> alpha0_log_;
};

}  // namespace astseg
