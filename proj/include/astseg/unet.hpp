#pragma once

// High-resolution feature map generator: a U-net whose decoder stops at
// stride 4, emitting a d_phi-channel feature map and K attention logit maps
// at (h/4, w/4). Down blocks halve resolution with a strided 4x4 conv
// followed by a residual 3x3 conv; up blocks concatenate the skip feature of
// matching size before a residual 3x3 conv and a 4x4 transpose conv.

#include <cstdint>
#include <string>
#include <vector>

#include "astseg/nn.hpp"

namespace astseg {

struct FeatureGeneratorConfig {
  int64_t input_h = 64, input_w = 64;
  int64_t slots = 4;    // K
  int64_t d_zwhat = 32;
  int64_t d_s = 1;      // 1 isotropic, 2 anisotropic
  // widths[0] is the stem; widths[1..] are the down blocks
  std::vector<int64_t> widths = {32, 64, 96, 128};
  bool batchnorm = false;

  int64_t d_phi() const { return d_s + 1 + d_zwhat; }
  int64_t depth() const { return static_cast<int64_t>(widths.size()) - 1; }
  int64_t out_h() const { return input_h / 4; }
  int64_t out_w() const { return input_w / 4; }

  void validate() const {
    check_config(widths.size() >= 3, "feature_generator.widths needs a stem plus at least 2 blocks");
    const int64_t d = depth();
    check_config((input_h % (int64_t(1) << d)) == 0 && (input_w % (int64_t(1) << d)) == 0,
                 "image size must be divisible by 2^depth");
    check_config(slots >= 1, "slot count K must be >= 1");
    check_config(d_s == 1 || d_s == 2, "d_s must be 1 or 2");
  }
};

template <typename T>
struct FeatureMaps {
  Tensor<T> phi;     // [B, d_phi, h*, w*]
  Tensor<T> logits;  // [B, K, h*, w*]
};

template <typename T>
class FeatureGenerator {
 public:
  FeatureGenerator() = default;

  FeatureGenerator(ParamStore<T>& store, const std::string& prefix,
                   const FeatureGeneratorConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    const auto& w = cfg.widths;
    const bool bn = cfg.batchnorm;
    stem_conv_ = Conv2dLayer<T>::create(store, prefix + ".stem", 3, w[0], 3, 1, 1, rng);
    stem_norm_ = Norm2dLayer<T>::create(store, prefix + ".stem.norm", w[0], bn);
    for (size_t i = 1; i < w.size(); ++i) {
      const std::string p = prefix + ".down" + std::to_string(i);
      down_conv_.push_back(Conv2dLayer<T>::create(store, p, w[i - 1], w[i], 4, 2, 1, rng));
      down_norm_.push_back(Norm2dLayer<T>::create(store, p + ".norm", w[i], bn));
      down_res_.push_back(Conv2dLayer<T>::create(store, p + ".res", w[i], w[i], 3, 1, 1, rng));
      down_res_norm_.push_back(Norm2dLayer<T>::create(store, p + ".res.norm", w[i], bn));
    }
    const int64_t wd = w.back();
    center_ = Conv2dLayer<T>::create(store, prefix + ".center", wd, wd, 3, 1, 1, rng);
    center_norm_ = Norm2dLayer<T>::create(store, prefix + ".center.norm", wd, bn);
    // up blocks from the deepest resolution back to stride 4
    for (int64_t j = cfg.depth(); j >= 3; --j) {
      const std::string p = prefix + ".up" + std::to_string(j);
      const int64_t cj = w[static_cast<size_t>(j)];
      up_res_.push_back(Conv2dLayer<T>::create(store, p + ".res", 2 * cj, 2 * cj, 3, 1, 1, rng));
      up_res_norm_.push_back(Norm2dLayer<T>::create(store, p + ".res.norm", 2 * cj, bn));
      up_tconv_.push_back(TransposeConv2dLayer<T>::create(
          store, p, 2 * cj, w[static_cast<size_t>(j - 1)], 4, 2, 1, rng));
      up_norm_.push_back(Norm2dLayer<T>::create(store, p + ".norm",
                                                w[static_cast<size_t>(j - 1)], bn));
    }
    const int64_t head_in = 2 * w[2];
    const int64_t m = cfg.d_phi() + cfg.slots;
    head_conv_ = Conv2dLayer<T>::create(store, prefix + ".head", head_in, m, 3, 1, 1, rng);
    head_norm_ = Norm2dLayer<T>::create(store, prefix + ".head.norm", m, bn);
    head_res_ = Conv2dLayer<T>::create(store, prefix + ".head.res", m, m, 3, 1, 1, rng);
    head_res_norm_ = Norm2dLayer<T>::create(store, prefix + ".head.res.norm", m, bn);
    head_out_ = Conv2dLayer<T>::create(store, prefix + ".head.out", m, m, 1, 1, 0, rng);

    // The K attention-logit output channels start small, with distinct
    // per-slot biases to break slot symmetry.
    auto& ow = head_out_.w.value();
    const int64_t row = m;  // 1x1 kernel: one weight per input channel
    for (int64_t k = 0; k < cfg.slots; ++k) {
      const int64_t c = cfg.d_phi() + k;
      for (int64_t i = 0; i < row; ++i)
        ow[static_cast<size_t>(c * row + i)] *= T(0.1);
      head_out_.b.value()[static_cast<size_t>(c)] = static_cast<T>(rng.uniform(-0.05, 0.05));
    }
  }

  const FeatureGeneratorConfig& config() const { return cfg_; }

  FeatureMaps<T> forward(const Tensor<T>& image, bool training) const {
    check(image.ndim() == 4 && image.size(1) == 3 && image.size(2) == cfg_.input_h &&
              image.size(3) == cfg_.input_w,
          "feature generator expects [B,3," + std::to_string(cfg_.input_h) + "," +
              std::to_string(cfg_.input_w) + "], got " + shape_str(image.shape()));

    Tensor<T> x = celu(stem_norm_.forward(stem_conv_.forward(image), training));
    std::vector<Tensor<T>> down_out;  // down_out[i] at stride 2^(i+1)
    for (size_t i = 0; i < down_conv_.size(); ++i) {
      x = celu(down_norm_[i].forward(down_conv_[i].forward(x), training));
      x = add(x, celu(down_res_norm_[i].forward(down_res_[i].forward(x), training)));
      down_out.push_back(x);
    }
    x = celu(center_norm_.forward(center_.forward(x), training));
    for (size_t u = 0; u < up_tconv_.size(); ++u) {
      const size_t skip = down_out.size() - 1 - u;
      Tensor<T> cat = concat<T>({x, down_out[skip]}, 1);
      cat = add(cat, celu(up_res_norm_[u].forward(up_res_[u].forward(cat), training)));
      x = celu(up_norm_[u].forward(up_tconv_[u].forward(cat), training));
    }
    // head at stride 4 with the matching skip
    Tensor<T> cat = concat<T>({x, down_out[1]}, 1);
    Tensor<T> h = celu(head_norm_.forward(head_conv_.forward(cat), training));
    h = add(h, celu(head_res_norm_.forward(head_res_.forward(h), training)));
    Tensor<T> out = head_out_.forward(h);

    FeatureMaps<T> maps;
    maps.phi = narrow(out, 1, 0, cfg_.d_phi());
    maps.logits = narrow(out, 1, cfg_.d_phi(), cfg_.slots);
    return maps;
  }

 private:
  FeatureGeneratorConfig cfg_;
  Conv2dLayer<T> stem_conv_, center_;
  Norm2dLayer<T> stem_norm_, center_norm_;
  std::vector<Conv2dLayer<T>> down_conv_, down_res_;
  std::vector<Norm2dLayer<T>> down_norm_, down_res_norm_;
  std::vector<Conv2dLayer<T>> up_res_;
  std::vector<Norm2dLayer<T>> up_res_norm_;
  std::vector<TransposeConv2dLayer<T>> up_tconv_;
  std::vector<Norm2dLayer<T>> up_norm_;
  Conv2dLayer<T> head_conv_, head_res_, head_out_;
  Norm2dLayer<T> head_norm_, head_res_norm_;
};

}  // namespace astseg
