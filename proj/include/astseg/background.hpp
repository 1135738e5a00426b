#pragma once

// Background model: a deterministic convolutional autoencoder with a flat
// low-dimensional bottleneck. Trained alone in curriculum phase 1 with a
// per-pixel L1 loss whose median-seeking behaviour suppresses the sparse
// foreground, frozen in phase 2, fine-tuned in phase 3.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "astseg/nn.hpp"
#include "json.hpp"

namespace astseg {

struct BackgroundConfig {
  int64_t latent_dim = 64;
  std::vector<int64_t> widths = {32, 64, 128, 256};
  int64_t input_h = 64, input_w = 64;

  void validate() const {
    check_config(!widths.empty(), "background.widths must not be empty");
    const int64_t d = static_cast<int64_t>(widths.size());
    check_config((input_h % (int64_t(1) << d)) == 0 && (input_w % (int64_t(1) << d)) == 0,
                 "image size must be divisible by 2^|background.widths|");
    check_config(latent_dim >= 1, "background.latent_dim must be >= 1");
  }
};

template <typename T>
class BackgroundModel {
 public:
  BackgroundModel() = default;

  BackgroundModel(ParamStore<T>& store, const std::string& prefix,
                  const BackgroundConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    const auto& w = cfg.widths;
    int64_t c_prev = 3;
    for (size_t i = 0; i < w.size(); ++i) {
      const std::string p = prefix + ".enc" + std::to_string(i);
      enc_.push_back(Conv2dLayer<T>::create(store, p, c_prev, w[i], 4, 2, 1, rng));
      enc_norm_.push_back(Norm2dLayer<T>::create(store, p + ".norm", w[i], false));
      c_prev = w[i];
    }
    bott_h_ = cfg.input_h >> w.size();
    bott_w_ = cfg.input_w >> w.size();
    const int64_t flat = c_prev * bott_h_ * bott_w_;
    to_latent_ = LinearLayer<T>::create(store, prefix + ".to_latent", flat, cfg.latent_dim, rng);
    from_latent_ = LinearLayer<T>::create(store, prefix + ".from_latent", cfg.latent_dim, flat, rng);
    for (size_t i = w.size(); i-- > 1;) {
      const std::string p = prefix + ".dec" + std::to_string(i);
      dec_.push_back(TransposeConv2dLayer<T>::create(store, p, w[i], w[i - 1], 4, 2, 1, rng));
      dec_norm_.push_back(Norm2dLayer<T>::create(store, p + ".norm", w[i - 1], false));
    }
    out_ = TransposeConv2dLayer<T>::create(store, prefix + ".out", w[0], 3, 4, 2, 1, rng);
  }

  const BackgroundConfig& config() const { return cfg_; }

  Tensor<T> reconstruct(const Tensor<T>& image, bool training) const {
    check(image.ndim() == 4 && image.size(1) == 3 && image.size(2) == cfg_.input_h &&
              image.size(3) == cfg_.input_w,
          "background model expects [B,3," + std::to_string(cfg_.input_h) + "," +
              std::to_string(cfg_.input_w) + "], got " + shape_str(image.shape()));
    const int64_t b = image.size(0);
    Tensor<T> x = image;
    for (size_t i = 0; i < enc_.size(); ++i)
      x = celu(enc_norm_[i].forward(enc_[i].forward(x), training));
    Tensor<T> z = to_latent_.forward(reshape(x, {b, x.numel() / b}));
    Tensor<T> y = from_latent_.forward(z);
    y = reshape(y, {b, cfg_.widths.back(), bott_h_, bott_w_});
    for (size_t i = 0; i < dec_.size(); ++i)
      y = celu(dec_norm_[i].forward(dec_[i].forward(y), training));
    return sigmoid(out_.forward(y));
  }

 private:
  BackgroundConfig cfg_;
  int64_t bott_h_ = 0, bott_w_ = 0;
  std::vector<Conv2dLayer<T>> enc_;
  std::vector<Norm2dLayer<T>> enc_norm_;
  LinearLayer<T> to_latent_, from_latent_;
  std::vector<TransposeConv2dLayer<T>> dec_;
  std::vector<Norm2dLayer<T>> dec_norm_;
  TransposeConv2dLayer<T> out_;
};

// Cache file for precomputed backgrounds (frozen-background training):
// one JSON header line {count, h, w} followed by count raw little-endian
// float32 planes of 3*h*w values each.
inline void save_background_cache(const std::string& path,
                                  const std::vector<std::vector<float>>& planes,
                                  int64_t h, int64_t w) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check_io(out.good(), "cannot open background cache '" + path + "' for writing");
  nlohmann::json header = {{"count", planes.size()}, {"h", h}, {"w", w}};
  out << header.dump() << '\n';
  for (const auto& p : planes) {
    check_io(static_cast<int64_t>(p.size()) == 3 * h * w, "background cache plane size mismatch");
    out.write(reinterpret_cast<const char*>(p.data()),
              static_cast<std::streamsize>(p.size() * sizeof(float)));
  }
  check_io(out.good(), "write failed for background cache '" + path + "'");
}

inline std::vector<std::vector<float>> load_background_cache(const std::string& path,
                                                             int64_t h, int64_t w) {
  std::ifstream in(path, std::ios::binary);
  check_io(in.good(), "cannot open background cache '" + path + "'");
  std::string line;
  check_io(static_cast<bool>(std::getline(in, line)), "background cache missing header");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  check_io(!header.is_discarded(), "background cache header is not valid JSON");
  check_io(header.at("h").get<int64_t>() == h && header.at("w").get<int64_t>() == w,
           "background cache resolution mismatch");
  const int64_t count = header.at("count").get<int64_t>();
  std::vector<std::vector<float>> planes(static_cast<size_t>(count));
  for (auto& p : planes) {
    p.resize(static_cast<size_t>(3 * h * w));
    in.read(reinterpret_cast<char*>(p.data()),
            static_cast<std::streamsize>(p.size() * sizeof(float)));
    check_io(in.good(), "background cache '" + path + "' truncated");
  }
  return planes;
}

}  // namespace astseg
