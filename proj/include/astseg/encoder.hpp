#pragma once

// Slot refinement and latent extraction: a linear embed into a transformer
// encoder over the K slots of each image (no positional encoding — slot
// order must not matter), a linear projection back, then clamping of the
// positions and the range maps that turn feature channels into the inverse
// scale s, the activation alpha and the appearance vector z_what.

#include <cstdint>
#include <string>
#include <vector>

#include "astseg/nn.hpp"

namespace astseg {

struct EncoderConfig {
  int64_t d_t = 256;
  int64_t heads = 8;
  int64_t ff_dim = 512;
  int64_t layers = 6;
  double s_min = 1.3;
  double s_max = 24.0;
  bool anisotropic = false;
  bool use_transformer = true;
  double dropout = 0.0;  // kept at 0 for deterministic runs
  int64_t d_zwhat = 32;

  int64_t d_s() const { return anisotropic ? 2 : 1; }
  int64_t d_phi() const { return d_s() + 1 + d_zwhat; }

  void validate() const {
    check_config(d_t % heads == 0, "encoder.d_t must be divisible by encoder.heads");
    check_config(layers >= 1, "encoder.layers must be >= 1");
    check_config(s_min > 0 && s_max > s_min, "encoder scale range invalid");
    check_config(dropout >= 0.0 && dropout < 1.0, "encoder.dropout out of range");
  }
};

template <typename T>
struct SlotTriplets {
  Tensor<T> phi;  // [B, K, d_phi]
  Tensor<T> x;    // [B, K]
  Tensor<T> y;    // [B, K]
};

template <typename T>
struct ObjectLatents {
  Tensor<T> z_what;  // [B, K, d_zwhat]
  Tensor<T> x, y;    // [B, K], in [-1, 1]
  Tensor<T> s;       // [B, K, d_s], in [s_min, s_max]
  Tensor<T> alpha;   // [B, K], positive
};

// One post-norm encoder layer: self-attention over slots, residual + layer
// norm, position-wise feed-forward, residual + layer norm.
template <typename T>
struct TransformerLayer {
  LinearLayer<T> wq, wk, wv, wo, ff1, ff2;
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  int64_t heads = 1, d_t = 0;

  static TransformerLayer create(ParamStore<T>& store, const std::string& prefix,
                                 int64_t d_t, int64_t heads, int64_t ff_dim,
                                 Rng& rng) {
    TransformerLayer l;
    l.heads = heads;
    l.d_t = d_t;
    l.wq = LinearLayer<T>::create(store, prefix + ".q", d_t, d_t, rng);
    l.wk = LinearLayer<T>::create(store, prefix + ".k", d_t, d_t, rng);
    l.wv = LinearLayer<T>::create(store, prefix + ".v", d_t, d_t, rng);
    l.wo = LinearLayer<T>::create(store, prefix + ".o", d_t, d_t, rng);
    l.ff1 = LinearLayer<T>::create(store, prefix + ".ff1", d_t, ff_dim, rng);
    l.ff2 = LinearLayer<T>::create(store, prefix + ".ff2", ff_dim, d_t, rng);
    l.ln1_g = store.add(prefix + ".ln1.scale", Tensor<T>::filled({d_t}, T(1)));
    l.ln1_b = store.add(prefix + ".ln1.shift", Tensor<T>::zeros({d_t}));
    l.ln2_g = store.add(prefix + ".ln2.scale", Tensor<T>::filled({d_t}, T(1)));
    l.ln2_b = store.add(prefix + ".ln2.shift", Tensor<T>::zeros({d_t}));
    return l;
  }

  // softmax(Q K^T / sqrt(d_head)) per head; [B*heads, K, K]
  Tensor<T> attention_weights(const Tensor<T>& h) const {
    const int64_t b = h.size(0), k = h.size(1);
    const int64_t dh = d_t / heads;
    auto heads_view = [&](const Tensor<T>& t) {
      // [B,K,D] -> [B*heads, K, dh]
      return reshape(permute(reshape(t, {b, k, heads, dh}), {0, 2, 1, 3}),
                     {b * heads, k, dh});
    };
    Tensor<T> q = heads_view(wq.forward(h));
    Tensor<T> kk = heads_view(wk.forward(h));
    Tensor<T> scores = mul_scalar(matmul(q, permute(kk, {0, 2, 1})),
                                  static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    return softmax(scores);
  }

  Tensor<T> forward(const Tensor<T>& h, double dropout = 0.0,
                    Rng* dropout_rng = nullptr) const {
    const int64_t b = h.size(0), k = h.size(1);
    const int64_t dh = d_t / heads;
    auto heads_view = [&](const Tensor<T>& t) {
      return reshape(permute(reshape(t, {b, k, heads, dh}), {0, 2, 1, 3}),
                     {b * heads, k, dh});
    };
    auto maybe_drop = [&](const Tensor<T>& t) {
      if (dropout <= 0.0 || !dropout_rng) return t;
      std::vector<T> mask(static_cast<size_t>(t.numel()));
      const T keep_scale = static_cast<T>(1.0 / (1.0 - dropout));
      for (auto& m : mask)
        m = dropout_rng->uniform() < dropout ? T(0) : keep_scale;
      return mul(t, Tensor<T>::from_data(t.shape(), std::move(mask)));
    };
    Tensor<T> attn = attention_weights(h);
    Tensor<T> v = heads_view(wv.forward(h));
    Tensor<T> ctx = matmul(attn, v);  // [B*heads, K, dh]
    ctx = reshape(permute(reshape(ctx, {b, heads, k, dh}), {0, 2, 1, 3}), {b, k, d_t});
    Tensor<T> h1 = layer_norm(add(h, maybe_drop(wo.forward(ctx))), ln1_g, ln1_b);
    Tensor<T> ff = ff2.forward(relu(ff1.forward(h1)));
    return layer_norm(add(h1, maybe_drop(ff)), ln2_g, ln2_b);
  }
};

// Full encoder-layer transform of a [B,K,d_t] slot sequence.
template <typename T>
Tensor<T> multi_head_self_attention(const Tensor<T>& input,
                                    const TransformerLayer<T>& layer) {
  check(input.ndim() == 3, "multi_head_self_attention expects [B,K,d_t]");
  check(input.size(2) == layer.d_t, "multi_head_self_attention width mismatch");
  return layer.forward(input);
}

template <typename T>
class SlotEncoder {
 public:
  SlotEncoder() = default;

  SlotEncoder(ParamStore<T>& store, const std::string& prefix,
              const EncoderConfig& cfg, Rng& rng)
      : cfg_(cfg) {
    cfg.validate();
    if (cfg.use_transformer) {
      const int64_t din = cfg.d_phi() + 2;
      embed_ = LinearLayer<T>::create(store, prefix + ".embed", din, cfg.d_t, rng);
      for (int64_t i = 0; i < cfg.layers; ++i)
        layers_.push_back(TransformerLayer<T>::create(
            store, prefix + ".layer" + std::to_string(i), cfg.d_t, cfg.heads,
            cfg.ff_dim, rng));
      proj_ = LinearLayer<T>::create(store, prefix + ".proj", cfg.d_t, din, rng);
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::vector<TransformerLayer<T>>& layers() const { return layers_; }

  // Identity when the transformer is disabled (ablation). dropout_rng is
  // only consulted when cfg.dropout > 0 (training).
  SlotTriplets<T> refine_slots(const SlotTriplets<T>& in,
                               Rng* dropout_rng = nullptr) const {
    if (!cfg_.use_transformer) return in;
    const int64_t b = in.phi.size(0), k = in.phi.size(1);
    const int64_t d_phi = in.phi.size(2);
    check(d_phi == cfg_.d_phi(), "refine_slots: phi width mismatch");
    Tensor<T> packed = concat<T>({reshape(in.x, {b, k, 1}), reshape(in.y, {b, k, 1}),
                                  in.phi}, 2);
    Tensor<T> h = embed_.forward(packed);
    for (const auto& layer : layers_) h = layer.forward(h, cfg_.dropout, dropout_rng);
    Tensor<T> out = proj_.forward(h);  // [B,K,2+d_phi]
    SlotTriplets<T> r;
    r.x = reshape(narrow(out, 2, 0, 1), {b, k});
    r.y = reshape(narrow(out, 2, 1, 1), {b, k});
    r.phi = narrow(out, 2, 2, d_phi);
    return r;
  }

  ObjectLatents<T> split_latents(const SlotTriplets<T>& refined) const {
    const int64_t b = refined.phi.size(0), k = refined.phi.size(1);
    const int64_t ds = cfg_.d_s();
    check(refined.phi.size(2) == ds + 1 + cfg_.d_zwhat,
          "split_latents: phi must have d_s + 1 + d_zwhat channels");
    ObjectLatents<T> lat;
    lat.x = clamp(refined.x, T(-1), T(1));
    lat.y = clamp(refined.y, T(-1), T(1));
    Tensor<T> raw_s = narrow(refined.phi, 2, 0, ds);
    lat.s = add_scalar(mul_scalar(sigmoid(raw_s), static_cast<T>(cfg_.s_max - cfg_.s_min)),
                       static_cast<T>(cfg_.s_min));
    lat.alpha = exp(reshape(narrow(refined.phi, 2, ds, 1), {b, k}));
    lat.z_what = narrow(refined.phi, 2, ds + 1, cfg_.d_zwhat);
    return lat;
  }

 private:
  EncoderConfig cfg_;
  LinearLayer<T> embed_, proj_;
  std::vector<TransformerLayer<T>> layers_;
};

}  // namespace astseg
