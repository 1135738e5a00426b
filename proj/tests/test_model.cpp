#include <cmath>
#include <numeric>

#include "astseg/background.hpp"
#include "astseg/encoder.hpp"
#include "astseg/gradcheck.hpp"
#include "astseg/localization.hpp"
#include "astseg/model.hpp"
#include "astseg/renderer.hpp"
#include "astseg/unet.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace astseg;

namespace {

FeatureGeneratorConfig mini_fg_config() {
  FeatureGeneratorConfig cfg;
  cfg.input_h = 8;
  cfg.input_w = 8;
  cfg.slots = 2;
  cfg.d_zwhat = 3;
  cfg.d_s = 1;
  cfg.widths = {3, 4, 5};  // depth 2
  return cfg;
}

EncoderConfig mini_enc_config() {
  EncoderConfig cfg;
  cfg.d_t = 16;
  cfg.heads = 2;
  cfg.ff_dim = 24;
  cfg.layers = 1;
  cfg.d_zwhat = 3;
  return cfg;
}

}  // namespace

// ---- feature generator ----

TEST_CASE("feature generator: stride-4 output contract across sizes") {
  for (int64_t size : {32, 64}) {
    FeatureGeneratorConfig cfg;
    cfg.input_h = size;
    cfg.input_w = size;
    cfg.slots = 4;
    cfg.widths = {4, 6, 8, 10};
    ParamStore<float> store;
    Rng rng(2);
    FeatureGenerator<float> fg(store, "fg", cfg, rng);
    auto maps = fg.forward(Tensor<float>::zeros({1, 3, size, size}), false);
    CHECK(maps.phi.shape() == Shape{1, cfg.d_phi(), size / 4, size / 4});
    CHECK(maps.logits.shape() == Shape{1, 4, size / 4, size / 4});
  }
}

TEST_CASE("feature generator: zero image with a zeroed head gives uniform attention") {
  auto cfg = mini_fg_config();
  ParamStore<double> store;
  Rng rng(3);
  FeatureGenerator<double> fg(store, "fg", cfg, rng);
  for (auto* p : {store.find("fg.head.out.w"), store.find("fg.head.out.b")}) {
    REQUIRE(p != nullptr);
    std::fill(p->tensor.value().begin(), p->tensor.value().end(), 0.0);
  }
  auto maps = fg.forward(Tensor<double>::zeros({1, 3, 8, 8}), false);
  auto attn = normalize_attention(maps.logits);
  for (double v : attn.value()) CHECK(v == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("feature generator: deterministic init and distinct slot biases") {
  auto cfg = mini_fg_config();
  ParamStore<double> s1, s2;
  Rng r1(42), r2(42);
  FeatureGenerator<double> fg1(s1, "fg", cfg, r1);
  FeatureGenerator<double> fg2(s2, "fg", cfg, r2);
  REQUIRE(s1.params().size() == s2.params().size());
  for (size_t i = 0; i < s1.params().size(); ++i) {
    CHECK(s1.params()[i].name == s2.params()[i].name);
    CHECK(s1.params()[i].tensor.value() == s2.params()[i].tensor.value());
  }
  auto* head_b = s1.find("fg.head.out.b");
  const auto& b = head_b->tensor.value();
  const int64_t d_phi = cfg.d_phi();
  CHECK(b[static_cast<size_t>(d_phi)] != b[static_cast<size_t>(d_phi + 1)]);
}

TEST_CASE("feature generator: parameter count matches the layer-by-layer sum") {
  FeatureGeneratorConfig cfg;
  cfg.input_h = 64;
  cfg.input_w = 64;
  cfg.slots = 4;
  cfg.d_zwhat = 32;
  cfg.d_s = 1;
  cfg.widths = {16, 32, 48, 64};
  ParamStore<float> store;
  Rng rng(5);
  FeatureGenerator<float> fg(store, "fg", cfg, rng);

  auto conv = [](int64_t o, int64_t c, int64_t k) { return o * c * k * k + o; };
  auto norm = [](int64_t c) { return 2 * c; };
  const int64_t m = cfg.d_phi() + cfg.slots;  // 34 + 4
  int64_t expect = 0;
  expect += conv(16, 3, 3) + norm(16);                   // stem
  expect += conv(32, 16, 4) + norm(32) + conv(32, 32, 3) + norm(32);   // down1
  expect += conv(48, 32, 4) + norm(48) + conv(48, 48, 3) + norm(48);   // down2
  expect += conv(64, 48, 4) + norm(64) + conv(64, 64, 3) + norm(64);   // down3
  expect += conv(64, 64, 3) + norm(64);                  // center
  expect += conv(128, 128, 3) + norm(128);               // up3 residual on concat
  expect += 128 * 48 * 4 * 4 + 48 + norm(48);            // up3 transpose conv
  expect += conv(m, 96, 3) + norm(m) + conv(m, m, 3) + norm(m) + conv(m, m, 1);
  CHECK(store.total_elements() == expect);
}

TEST_CASE("feature generator: miniature 2-block configuration gradient-checks") {
  auto cfg = mini_fg_config();
  ParamStore<double> store;
  Rng rng(7);
  FeatureGenerator<double> fg(store, "fg", cfg, rng);
  auto image = testutil::random_tensor<double>({1, 3, 8, 8}, rng, 0.0, 1.0);
  auto* stem_w = store.find("fg.stem.w");
  auto* head_w = store.find("fg.head.out.w");
  auto fn = [&fg](std::vector<Tensor<double>>& in) {
    auto maps = fg.forward(in[0], false);
    return add(sum(mul(maps.phi, maps.phi)), sum(exp(mul_scalar(maps.logits, 0.1))));
  };
  auto res = gradient_check_fn("feature_generator", fn,
                               {image, stem_w->tensor, head_w->tensor}, 1e-5, 1e-4);
  CHECK(res.pass);
}

TEST_CASE("feature generator: input shift moves outputs one cell (reported)") {
  FeatureGeneratorConfig cfg;
  cfg.input_h = 32;
  cfg.input_w = 32;
  cfg.slots = 2;
  cfg.widths = {6, 8, 10};
  ParamStore<float> store;
  Rng rng(9);
  FeatureGenerator<float> fg(store, "fg", cfg, rng);
  auto image = testutil::random_tensor<float>({1, 3, 32, 32}, rng, 0.0, 1.0);
  auto base = fg.forward(image, false);
  auto shifted_in = translate_map(image, 4, 0, TranslateMode::circular);
  auto shifted = fg.forward(shifted_in, false);
  auto expect = translate_map(base.logits, 1, 0, TranslateMode::circular);
  double dev = 0, scale = 0;
  for (size_t i = 0; i < expect.value().size(); ++i) {
    dev = std::max(dev, std::abs(static_cast<double>(expect.value()[i]) -
                                 static_cast<double>(shifted.logits.value()[i])));
    scale = std::max(scale, std::abs(static_cast<double>(base.logits.value()[i])));
  }
  // boundary effects make this approximate; the deviation is informational
  MESSAGE("shift-equivariance deviation ", dev, " vs logit scale ", scale);
  CHECK(dev < 10 * scale + 10);
}

// ---- slot encoder ----

TEST_CASE("refine_slots: identity when the transformer is disabled") {
  auto cfg = mini_enc_config();
  cfg.use_transformer = false;
  ParamStore<double> store;
  Rng rng(11);
  SlotEncoder<double> enc(store, "enc", cfg, rng);
  CHECK(store.params().empty());
  SlotTriplets<double> in;
  in.phi = testutil::random_tensor<double>({2, 3, cfg.d_phi()}, rng);
  in.x = testutil::random_tensor<double>({2, 3}, rng);
  in.y = testutil::random_tensor<double>({2, 3}, rng);
  auto out = enc.refine_slots(in);
  CHECK(out.phi.value() == in.phi.value());
  CHECK(out.x.value() == in.x.value());
  CHECK(out.y.value() == in.y.value());
}

TEST_CASE("refine_slots is permutation-equivariant over slots") {
  auto cfg = mini_enc_config();
  ParamStore<double> store;
  Rng rng(13);
  SlotEncoder<double> enc(store, "enc", cfg, rng);
  const int64_t k = 4;
  SlotTriplets<double> in;
  in.phi = testutil::random_tensor<double>({1, k, cfg.d_phi()}, rng);
  in.x = testutil::random_tensor<double>({1, k}, rng);
  in.y = testutil::random_tensor<double>({1, k}, rng);
  auto base = enc.refine_slots(in);

  std::vector<int> perm = {2, 0, 3, 1};
  auto permute_slots = [&](const Tensor<double>& t) {
    std::vector<double> v(t.value().size());
    const int64_t d = t.numel() / k;
    for (int64_t s = 0; s < k; ++s)
      for (int64_t j = 0; j < d; ++j)
        v[static_cast<size_t>(s * d + j)] =
            t.value()[static_cast<size_t>(perm[static_cast<size_t>(s)] * d + j)];
    return Tensor<double>::from_data(t.shape(), std::move(v));
  };
  SlotTriplets<double> pin;
  pin.phi = permute_slots(in.phi);
  pin.x = permute_slots(in.x);
  pin.y = permute_slots(in.y);
  auto pout = enc.refine_slots(pin);
  CHECK(testutil::max_abs_diff(pout.phi.value(), permute_slots(base.phi).value()) < 1e-6);
  CHECK(testutil::max_abs_diff(pout.x.value(), permute_slots(base.x).value()) < 1e-6);
  CHECK(testutil::max_abs_diff(pout.y.value(), permute_slots(base.y).value()) < 1e-6);
}

TEST_CASE("refine_slots: zeroed projection weight leaves the bias everywhere") {
  auto cfg = mini_enc_config();
  ParamStore<double> store;
  Rng rng(17);
  SlotEncoder<double> enc(store, "enc", cfg, rng);
  auto* pw = store.find("enc.proj.w");
  auto* pb = store.find("enc.proj.b");
  std::fill(pw->tensor.value().begin(), pw->tensor.value().end(), 0.0);
  SlotTriplets<double> in;
  in.phi = testutil::random_tensor<double>({1, 3, cfg.d_phi()}, rng);
  in.x = testutil::random_tensor<double>({1, 3}, rng);
  in.y = testutil::random_tensor<double>({1, 3}, rng);
  auto out = enc.refine_slots(in);
  for (int s = 0; s < 3; ++s) {
    CHECK(out.x.value()[static_cast<size_t>(s)] == doctest::Approx(pb->tensor.value()[0]));
    CHECK(out.y.value()[static_cast<size_t>(s)] == doctest::Approx(pb->tensor.value()[1]));
  }
}

TEST_CASE("multi_head_self_attention: K=1 attends to itself with weight one") {
  ParamStore<double> store;
  Rng rng(19);
  auto layer = TransformerLayer<double>::create(store, "t", 8, 2, 12, rng);
  auto h = testutil::random_tensor<double>({2, 1, 8}, rng);
  auto attn = layer.attention_weights(h);
  CHECK(attn.shape() == Shape{4, 1, 1});
  for (double v : attn.value()) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attention rows sum to one") {
  ParamStore<double> store;
  Rng rng(23);
  auto layer = TransformerLayer<double>::create(store, "t", 8, 2, 12, rng);
  auto h = testutil::random_tensor<double>({1, 5, 8}, rng);
  auto attn = layer.attention_weights(h);  // [2, 5, 5]
  for (int r = 0; r < 10; ++r) {
    double s = 0;
    for (int c = 0; c < 5; ++c) s += attn.value()[static_cast<size_t>(r * 5 + c)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("multi_head_self_attention matches an explicit per-head loop oracle") {
  const int64_t b = 2, k = 3, d = 8, heads = 2, dh = d / heads, ff = 12;
  ParamStore<double> store;
  Rng rng(29);
  auto layer = TransformerLayer<double>::create(store, "t", d, heads, ff, rng);
  auto h = testutil::random_tensor<double>({b, k, d}, rng);
  auto fast = multi_head_self_attention(h, layer);

  // slow reference: per-head loops, explicit layer norms
  auto matvec = [&](const Tensor<double>& w, const Tensor<double>& bias,
                    const std::vector<double>& x, int64_t in, int64_t out_d,
                    std::vector<double>& y) {
    for (int64_t o = 0; o < out_d; ++o) {
      double acc = bias.value()[static_cast<size_t>(o)];
      for (int64_t i = 0; i < in; ++i)
        acc += x[static_cast<size_t>(i)] * w.value()[static_cast<size_t>(i * out_d + o)];
      y[static_cast<size_t>(o)] = acc;
    }
  };
  auto layer_norm_row = [&](std::vector<double>& x, const Tensor<double>& g,
                            const Tensor<double>& bta) {
    double mu = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (size_t i = 0; i < x.size(); ++i)
      x[i] = g.value()[i] * ((x[i] - mu) * inv) + bta.value()[i];
  };

  std::vector<double> out(static_cast<size_t>(b * k * d));
  for (int64_t bi = 0; bi < b; ++bi) {
    std::vector<std::vector<double>> q(static_cast<size_t>(k)), kk(static_cast<size_t>(k)),
        v(static_cast<size_t>(k));
    for (int64_t s = 0; s < k; ++s) {
      std::vector<double> row(h.value().begin() + (bi * k + s) * d,
                              h.value().begin() + (bi * k + s + 1) * d);
      q[static_cast<size_t>(s)].resize(static_cast<size_t>(d));
      kk[static_cast<size_t>(s)].resize(static_cast<size_t>(d));
      v[static_cast<size_t>(s)].resize(static_cast<size_t>(d));
      matvec(layer.wq.w, layer.wq.b, row, d, d, q[static_cast<size_t>(s)]);
      matvec(layer.wk.w, layer.wk.b, row, d, d, kk[static_cast<size_t>(s)]);
      matvec(layer.wv.w, layer.wv.b, row, d, d, v[static_cast<size_t>(s)]);
    }
    // attention per head
    std::vector<std::vector<double>> ctx(static_cast<size_t>(k),
                                         std::vector<double>(static_cast<size_t>(d), 0.0));
    for (int64_t head = 0; head < heads; ++head) {
      for (int64_t s = 0; s < k; ++s) {
        std::vector<double> scores(static_cast<size_t>(k));
        for (int64_t t2 = 0; t2 < k; ++t2) {
          double acc = 0;
          for (int64_t i = 0; i < dh; ++i)
            acc += q[static_cast<size_t>(s)][static_cast<size_t>(head * dh + i)] *
                   kk[static_cast<size_t>(t2)][static_cast<size_t>(head * dh + i)];
          scores[static_cast<size_t>(t2)] = acc / std::sqrt(static_cast<double>(dh));
        }
        double mx = scores[0];
        for (double sc : scores) mx = std::max(mx, sc);
        double z = 0;
        for (auto& sc : scores) {
          sc = std::exp(sc - mx);
          z += sc;
        }
        for (auto& sc : scores) sc /= z;
        for (int64_t t2 = 0; t2 < k; ++t2)
          for (int64_t i = 0; i < dh; ++i)
            ctx[static_cast<size_t>(s)][static_cast<size_t>(head * dh + i)] +=
                scores[static_cast<size_t>(t2)] *
                v[static_cast<size_t>(t2)][static_cast<size_t>(head * dh + i)];
      }
    }
    for (int64_t s = 0; s < k; ++s) {
      std::vector<double> proj(static_cast<size_t>(d));
      matvec(layer.wo.w, layer.wo.b, ctx[static_cast<size_t>(s)], d, d, proj);
      std::vector<double> h1(static_cast<size_t>(d));
      for (int64_t i = 0; i < d; ++i)
        h1[static_cast<size_t>(i)] =
            h.value()[static_cast<size_t>((bi * k + s) * d + i)] + proj[static_cast<size_t>(i)];
      layer_norm_row(h1, layer.ln1_g, layer.ln1_b);
      std::vector<double> f1(static_cast<size_t>(ff));
      matvec(layer.ff1.w, layer.ff1.b, h1, d, ff, f1);
      for (auto& x : f1) x = std::max(0.0, x);
      std::vector<double> f2(static_cast<size_t>(d));
      matvec(layer.ff2.w, layer.ff2.b, f1, ff, d, f2);
      std::vector<double> h2(static_cast<size_t>(d));
      for (int64_t i = 0; i < d; ++i) h2[static_cast<size_t>(i)] = h1[static_cast<size_t>(i)] + f2[static_cast<size_t>(i)];
      layer_norm_row(h2, layer.ln2_g, layer.ln2_b);
      for (int64_t i = 0; i < d; ++i) out[static_cast<size_t>((bi * k + s) * d + i)] = h2[static_cast<size_t>(i)];
    }
  }
  CHECK(testutil::max_abs_diff(fast.value(), out) < 1e-5);
}

TEST_CASE("split_latents: range maps and clamping") {
  auto cfg = mini_enc_config();
  ParamStore<double> store;
  Rng rng(31);
  SlotEncoder<double> enc(store, "enc", cfg, rng);

  SlotTriplets<double> refined;
  const int64_t d_phi = cfg.d_phi();  // 1 + 1 + 3
  std::vector<double> phi(static_cast<size_t>(d_phi), 0.0);
  refined.phi = Tensor<double>::from_data({1, 1, d_phi}, phi);
  refined.x = Tensor<double>::from_data({1, 1}, {3.2});
  refined.y = Tensor<double>::from_data({1, 1}, {-0.4});
  auto lat = enc.split_latents(refined);
  CHECK(lat.s.value()[0] == doctest::Approx((1.3 + 24.0) / 2.0));  // sigmoid(0) midpoint
  CHECK(lat.alpha.value()[0] == doctest::Approx(1.0));             // exp(0)
  CHECK(lat.x.value()[0] == 1.0);                                  // clamped
  CHECK(lat.y.value()[0] == doctest::Approx(-0.4));
}

TEST_CASE("split_latents ranges hold for arbitrary finite inputs") {
  auto cfg = mini_enc_config();
  ParamStore<double> store;
  Rng rng(37);
  SlotEncoder<double> enc(store, "enc", cfg, rng);
  SlotTriplets<double> refined;
  refined.phi = testutil::random_tensor<double>({2, 4, cfg.d_phi()}, rng, -30.0, 30.0);
  refined.x = testutil::random_tensor<double>({2, 4}, rng, -5.0, 5.0);
  refined.y = testutil::random_tensor<double>({2, 4}, rng, -5.0, 5.0);
  auto lat = enc.split_latents(refined);
  for (double v : lat.s.value()) {
    CHECK(v > 1.3);
    CHECK(v < 24.0);
  }
  for (double v : lat.alpha.value()) CHECK(v > 0.0);
  for (double v : lat.x.value()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

// ---- full model encode ----

namespace {

ModelConfig mini_model_config() {
  ModelConfig cfg;
  cfg.image_h = 16;
  cfg.image_w = 16;
  cfg.slots = 2;
  cfg.fg = FeatureGeneratorConfig{};
  cfg.fg.input_h = 16;
  cfg.fg.input_w = 16;
  cfg.fg.slots = 2;
  cfg.fg.d_zwhat = 4;
  cfg.fg.widths = {4, 6, 8};
  cfg.enc = EncoderConfig{};
  cfg.enc.d_t = 8;
  cfg.enc.heads = 2;
  cfg.enc.ff_dim = 12;
  cfg.enc.layers = 1;
  cfg.enc.d_zwhat = 4;
  cfg.bg = BackgroundConfig{};
  cfg.bg.latent_dim = 6;
  cfg.bg.widths = {4, 8};
  cfg.bg.input_h = 16;
  cfg.bg.input_w = 16;
  cfg.rend = RendererConfig{};
  cfg.rend.glimpse_size = 8;
  cfg.rend.d_zwhat = 4;
  return cfg;
}

}  // namespace

TEST_CASE("encode: output shapes and determinism") {
  auto cfg = mini_model_config();
  Model<double> model(cfg, 99);
  Rng rng(5);
  auto image = testutil::random_tensor<double>({2, 3, 16, 16}, rng, 0.0, 1.0);
  auto r1 = model.encode(image, false);
  CHECK(r1.latents.z_what.shape() == Shape{2, 2, 4});
  CHECK(r1.latents.x.shape() == Shape{2, 2});
  CHECK(r1.latents.s.shape() == Shape{2, 2, 1});
  CHECK(r1.latents.alpha.shape() == Shape{2, 2});
  auto r2 = model.encode(image, false);
  CHECK(r1.latents.z_what.value() == r2.latents.z_what.value());
  CHECK(r1.latents.x.value() == r2.latents.x.value());
}

TEST_CASE("encode without transformer keeps clamped soft-argmax positions") {
  auto cfg = mini_model_config();
  cfg.enc.use_transformer = false;
  Model<double> model(cfg, 7);
  Rng rng(6);
  auto image = testutil::random_tensor<double>({1, 3, 16, 16}, rng, 0.0, 1.0);
  auto r = model.encode(image, false);
  for (size_t i = 0; i < r.latents.x.value().size(); ++i) {
    CHECK(r.latents.x.value()[i] ==
          std::clamp(r.initial.x.value()[i], -1.0, 1.0));
    CHECK(r.latents.y.value()[i] ==
          std::clamp(r.initial.y.value()[i], -1.0, 1.0));
  }
}

TEST_CASE("encode: gradient reaches the feature generator parameters") {
  auto cfg = mini_model_config();
  Model<double> model(cfg, 8);
  Rng rng(9);
  auto image = testutil::random_tensor<double>({1, 3, 16, 16}, rng, 0.0, 1.0);
  auto r = model.encode(image, true);
  auto loss = add(sum(mul(r.latents.z_what, r.latents.z_what)),
                  add(sum(mul(r.latents.x, r.latents.x)), sum(r.latents.alpha)));
  model.store().zero_grad();
  backward(loss);
  double gnorm = 0.0;
  for (auto& p : model.store().params())
    if (p.name.rfind("fg.", 0) == 0)
      for (double g : p.tensor.grad()) gnorm += g * g;
  CHECK(gnorm > 0.0);
}

// ---- renderer ----

TEST_CASE("glimpse generator: size, range, and the sigma(0) midpoint") {
  RendererConfig cfg;
  cfg.glimpse_size = 32;
  cfg.d_zwhat = 6;
  ParamStore<double> store;
  Rng rng(41);
  GlimpseGenerator<double> gen(store, "glimpse", cfg, rng);
  auto z = testutil::random_tensor<double>({1, 2, 6}, rng);
  auto gl = gen.generate(z, false);
  CHECK(gl.o.shape() == Shape{1, 2, 3, 32, 32});
  CHECK(gl.m.shape() == Shape{1, 2, 1, 32, 32});
  for (double v : gl.o.value()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  for (auto& p : store.params())
    std::fill(p.tensor.value().begin(), p.tensor.value().end(), 0.0);
  auto gl0 = gen.generate(z, false);
  for (double v : gl0.o.value()) CHECK(v == doctest::Approx(0.5));
  for (double v : gl0.m.value()) CHECK(v == doctest::Approx(0.5));
}

TEST_CASE("place_layers: centered placement occupies a 2/s extent") {
  const int64_t g = 8, canvas = 64;
  auto o = Tensor<double>::filled({1, 1, 3, g, g}, 1.0);
  auto m = Tensor<double>::filled({1, 1, 1, g, g}, 1.0);
  auto x = Tensor<double>::zeros({1, 1});
  auto y = Tensor<double>::zeros({1, 1});

  auto footprint = [&](double s_val, double threshold) {
    auto s = Tensor<double>::from_data({1, 1, 1}, {s_val});
    auto [L, M] = place_layers(o, m, x, y, s, canvas, canvas);
    int64_t cols = 0;
    for (int64_t i = 0; i < canvas; ++i) {
      double colmax = 0;
      for (int64_t j = 0; j < canvas; ++j)
        colmax = std::max(colmax, M.value()[static_cast<size_t>(j * canvas + i)]);
      if (colmax > threshold) ++cols;
    }
    return cols;
  };
  // hard support is roughly canvas * (2/s) / 2 pixels wide; the zero-padding
  // fade adds up to one glimpse texel on each side
  CHECK(footprint(24.0, 0.5) >= 2);
  CHECK(footprint(24.0, 0.5) <= 5);    // ~2.7 pixels at s = 24
  CHECK(footprint(4.0, 0.5) >= 14);
  CHECK(footprint(4.0, 0.5) <= 18);    // ~16 pixels at s = 4
  CHECK(footprint(4.0, 1e-6) <= 22);   // fade band included
}

TEST_CASE("place_layers: mask centroid tracks (x, y) with unit slope") {
  const int64_t g = 8, canvas = 32;
  ParamStore<double> store;
  Rng rng(43);
  auto o = Tensor<double>::filled({1, 1, 3, g, g}, 1.0);
  auto m = Tensor<double>::filled({1, 1, 1, g, g}, 1.0);
  auto s = Tensor<double>::from_data({1, 1, 1}, {6.0});
  auto grid = make_coordinate_grid<double>(canvas, canvas);

  auto centroid_x = [&](double xv) {
    auto x = Tensor<double>::from_data({1, 1}, {xv});
    auto y = Tensor<double>::zeros({1, 1});
    auto [L, M] = place_layers(o, m, x, y, s, canvas, canvas);
    double mass = 0, cx = 0;
    for (int64_t j = 0; j < canvas; ++j)
      for (int64_t i = 0; i < canvas; ++i) {
        const double v = M.value()[static_cast<size_t>(j * canvas + i)];
        mass += v;
        cx += v * grid.xs[static_cast<size_t>(i)];
      }
    return cx / mass;
  };
  const double pitch = 2.0 / (canvas - 1);
  for (double xv : {-0.4, 0.0, 0.3}) {
    CHECK(std::abs(centroid_x(xv) - xv) < pitch);
    // moving by +0.5 moves the centroid by +0.5 within one pixel pitch
    CHECK(std::abs((centroid_x(xv + 0.4) - centroid_x(xv)) - 0.4) < pitch);
  }
}

TEST_CASE("composite: symmetric half weights and empty-mask fallback") {
  const int64_t h = 3, w = 3;
  auto layers = Tensor<double>::filled({1, 2, 3, h, w}, 0.0);
  for (int64_t p = 0; p < 3 * h * w; ++p)
    layers.value()[static_cast<size_t>(3 * h * w + p)] = 1.0;  // object layer all ones
  auto masks = Tensor<double>::filled({1, 1, 1, h, w}, 1.0);
  auto alpha = Tensor<double>::from_data({1, 1}, {2.5});
  auto alpha0 = Tensor<double>::scalar(2.5);
  auto [wts, xhat] = composite(layers, masks, alpha, alpha0);
  for (double v : wts.value()) CHECK(v == doctest::Approx(0.5));
  for (double v : xhat.value()) CHECK(v == doctest::Approx(0.5));

  auto zero_masks = Tensor<double>::zeros({1, 1, 1, h, w});
  auto [w2, x2] = composite(layers, zero_masks, alpha, alpha0);
  for (int64_t p = 0; p < h * w; ++p) {
    CHECK(w2.value()[static_cast<size_t>(p)] == doctest::Approx(1.0));
    CHECK(x2.value()[static_cast<size_t>(p)] == doctest::Approx(0.0));
  }
}

TEST_CASE("composite: weight grows monotonically with activation") {
  auto layers = Tensor<double>::filled({1, 2, 3, 2, 2}, 0.5);
  auto masks = Tensor<double>::filled({1, 1, 1, 2, 2}, 1.0);
  auto alpha0 = Tensor<double>::scalar(1.0);
  double prev = 0.0;
  for (double a : {1.0, 10.0, 100.0, 10000.0}) {
    auto [wts, xh] = composite(layers, masks, Tensor<double>::from_data({1, 1}, {a}), alpha0);
    const double w1 = wts.value()[4];  // object weight at first pixel
    CHECK(w1 > prev);
    prev = w1;
  }
  CHECK(prev > 0.99);

  CHECK_THROWS_AS(composite(layers, masks, Tensor<double>::from_data({1, 1}, {-1.0}),
                            alpha0),
                  contract_error);
}

TEST_CASE("extract_segmentation: argmax with lowest-index ties") {
  auto w = Tensor<double>::from_data({1, 2, 1, 1, 2}, {0.6, 0.5, 0.4, 0.5});
  auto labels = extract_segmentation(w);
  CHECK(labels[0] == 0);  // 0.6 > 0.4
  CHECK(labels[1] == 0);  // exact tie resolves to the background index
}

TEST_CASE("segmentation is invariant to common activation scaling") {
  Rng rng(47);
  auto layers = testutil::random_tensor<double>({1, 3, 3, 4, 4}, rng, 0.0, 1.0);
  auto masks = testutil::random_tensor<double>({1, 2, 1, 4, 4}, rng, 0.0, 1.0);
  auto alpha = testutil::random_tensor<double>({1, 2}, rng, 0.5, 2.0);
  auto alpha0 = Tensor<double>::scalar(1.7);
  auto [w1, x1] = composite(layers, masks, alpha, alpha0);
  auto [w2, x2] = composite(layers, masks, mul_scalar(alpha, 37.0), mul_scalar(alpha0, 37.0));
  CHECK(extract_segmentation(w1) == extract_segmentation(w2));
}

TEST_CASE("render: alpha0 default is exp(11), zero masks reproduce the background") {
  auto cfg = mini_model_config();
  Model<double> model(cfg, 123);
  CHECK(model.config().rend.alpha0_init_log == 11.0);
  Rng rng(49);
  auto image = testutil::random_tensor<double>({1, 3, 16, 16}, rng, 0.0, 1.0);
  auto scene = model.forward(image, false, true);
  CHECK(scene.alpha0.item() == doctest::Approx(std::exp(11.0)));

  // per-pixel weights sum to one
  const int64_t kp1 = scene.weights.size(1);
  for (int64_t p = 0; p < 16 * 16; ++p) {
    double s = 0;
    for (int64_t k = 0; k < kp1; ++k)
      s += scene.weights.value()[static_cast<size_t>(k * 16 * 16 + p)];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }

  // forcing all object masks to zero turns the reconstruction into the background
  auto bg = model.background().reconstruct(image, false);
  auto zero_masks = Tensor<double>::zeros({1, 2, 1, 16, 16});
  auto layers = concat<double>({reshape(bg, {1, 1, 3, 16, 16}),
                                Tensor<double>::filled({1, 2, 3, 16, 16}, 0.3)}, 1);
  auto [w0, xhat] = composite(layers, zero_masks, Tensor<double>::filled({1, 2}, 1.0),
                              Tensor<double>::scalar(std::exp(11.0)));
  CHECK(testutil::max_abs_diff(xhat.value(), bg.value()) < 1e-12);
}

TEST_CASE("renderer gradients: glimpse parameters, placement pose, activations") {
  RendererConfig cfg;
  cfg.glimpse_size = 4;
  cfg.d_zwhat = 3;
  ParamStore<double> store;
  Rng rng(53);
  GlimpseGenerator<double> gen(store, "glimpse", cfg, rng);

  auto z = testutil::random_tensor<double>({1, 2, 3}, rng);
  auto x = testutil::random_tensor<double>({1, 2}, rng, -0.3, 0.3);
  auto y = testutil::random_tensor<double>({1, 2}, rng, -0.3, 0.3);
  auto s = testutil::random_tensor<double>({1, 2, 1}, rng, 2.0, 4.0);
  auto alpha = testutil::random_tensor<double>({1, 2}, rng, 0.5, 2.0);
  auto alpha0_log = Tensor<double>::from_data({1}, {1.0});
  auto bg = testutil::random_tensor<double>({1, 3, 8, 8}, rng, 0.0, 1.0);
  auto* tw = store.find("glimpse.t0.w");

  auto fn = [&](std::vector<Tensor<double>>& in) {
    ObjectLatents<double> lat;
    lat.z_what = in[0];
    lat.x = in[1];
    lat.y = in[2];
    lat.s = in[3];
    lat.alpha = exp(in[4]);
    auto scene = render(gen, lat, bg, in[5], false);
    return add(sum(mul(scene.xhat, scene.xhat)), sum(mul(scene.weights, scene.weights)));
  };
  auto res = gradient_check_fn("render_path", fn,
                               {z, x, y, s, alpha, alpha0_log, tw->tensor}, 1e-5, 1e-4);
  CHECK(res.pass);
}

// ---- background model ----

TEST_CASE("background: shape and range") {
  BackgroundConfig cfg;
  cfg.latent_dim = 6;
  cfg.widths = {4, 8};
  cfg.input_h = 16;
  cfg.input_w = 16;
  ParamStore<double> store;
  Rng rng(57);
  BackgroundModel<double> bg(store, "bg", cfg, rng);
  auto img = testutil::random_tensor<double>({2, 3, 16, 16}, rng, 0.0, 1.0);
  auto out = bg.reconstruct(img, false);
  CHECK(out.shape() == img.shape());
  for (double v : out.value()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("background: miniature autoencoder gradient-checks") {
  BackgroundConfig cfg;
  cfg.latent_dim = 4;
  cfg.widths = {3, 5};
  cfg.input_h = 8;
  cfg.input_w = 8;
  ParamStore<double> store;
  Rng rng(61);
  BackgroundModel<double> bg(store, "bg", cfg, rng);
  auto img = testutil::random_tensor<double>({1, 3, 8, 8}, rng, 0.1, 0.9);
  auto* enc_w = store.find("bg.enc0.w");
  auto* lat_w = store.find("bg.to_latent.w");
  auto fn = [&bg](std::vector<Tensor<double>>& in) {
    auto out = bg.reconstruct(in[0], false);
    return sum(mul(out, out));
  };
  auto res = gradient_check_fn("background", fn, {img, enc_w->tensor, lat_w->tensor},
                               1e-5, 1e-4);
  CHECK(res.pass);
}
