#pragma once

// Verification suites behind the `verify` CLI command: finite-difference
// gradient checks over every differentiable operation, the localization
// characterization checks, compositing invariant fuzzing, and the loss
// closed forms.

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "astseg/encoder.hpp"
#include "astseg/gradcheck.hpp"
#include "astseg/localization.hpp"
#include "astseg/losses.hpp"
#include "astseg/renderer.hpp"

namespace astseg {

struct SuiteResult {
  std::string name;
  int passed = 0;
  int failed = 0;
  std::vector<std::string> failures;

  bool ok() const { return failed == 0; }
  void tally(bool pass, const std::string& what) {
    if (pass) {
      ++passed;
    } else {
      ++failed;
      failures.push_back(what);
    }
  }
};

// Every named primitive plus the composed differentiable blocks the model
// uses: one encoder layer (attention path), both losses, and the
// compositing weights.
inline SuiteResult run_gradient_suite(int instances = 5, double rtol = 1e-4,
                                      uint64_t seed = 1234) {
  SuiteResult suite;
  suite.name = "gradient";
  for (const auto& op : gradient_check_op_names()) {
    for (int i = 0; i < instances; ++i) {
      auto res = gradient_check(op, seed + static_cast<uint64_t>(i), 1e-4, rtol);
      std::ostringstream what;
      what << op << "[" << i << "] worst rel err " << res.worst;
      suite.tally(res.pass, what.str());
    }
  }

  for (int i = 0; i < instances; ++i) {
    Rng rng(mix_seed(seed, 0x500u + static_cast<uint64_t>(i)));

    // one transformer encoder layer, checked in its input and core weights
    {
      ParamStore<double> store;
      auto layer = TransformerLayer<double>::create(store, "t", 8, 2, 16, rng);
      auto h = detail::random_tensor({2, 3, 8}, rng);
      auto fn = [layer](std::vector<Tensor<double>>& in) {
        auto out = multi_head_self_attention(in[0], layer);
        return sum(mul(out, out));
      };
      auto res = gradient_check_fn("attention_layer", fn,
                                   {h, layer.wq.w, layer.wv.w, layer.ff1.w},
                                   1e-5, rtol);
      suite.tally(res.pass, "attention_layer worst " + std::to_string(res.worst));
    }

    // reconstruction loss in its prediction argument
    {
      auto xhat = detail::random_tensor({1, 3, 4, 4}, rng, 0.1, 0.9);
      auto x = detail::random_tensor({1, 3, 4, 4}, rng, 0.1, 0.9);
      auto fn = [x](std::vector<Tensor<double>>& in) {
        return reconstruction_loss(in[0], x);
      };
      auto res = gradient_check_fn("reconstruction_loss", fn, {xhat}, 1e-5, rtol);
      suite.tally(res.pass, "reconstruction_loss worst " + std::to_string(res.worst));
    }

    // pixel entropy loss, weights bounded away from 0 so central differences
    // stay in the log's smooth region
    {
      auto w = detail::random_tensor({1, 3, 1, 3, 3}, rng, 0.1, 0.9);
      auto fn = [](std::vector<Tensor<double>>& in) {
        return pixel_entropy_loss(in[0]);
      };
      auto res = gradient_check_fn("pixel_entropy_loss", fn, {w}, 1e-5, rtol);
      suite.tally(res.pass, "pixel_entropy_loss worst " + std::to_string(res.worst));
    }

    // compositing path: weights and reconstruction against masks, layers
    // and activations
    {
      auto layers = detail::random_tensor({1, 3, 3, 4, 4}, rng, 0.0, 1.0);
      auto masks = detail::random_tensor({1, 2, 1, 4, 4}, rng, 0.05, 0.95);
      auto alpha = detail::random_tensor({1, 2}, rng, 0.5, 2.0);
      auto alpha0 = detail::random_tensor({1}, rng, 0.5, 2.0);
      auto fn = [](std::vector<Tensor<double>>& in) {
        auto [w, xhat] = composite(in[0], in[1], in[2], in[3]);
        return add(sum(mul(w, w)), sum(mul(xhat, xhat)));
      };
      auto res = gradient_check_fn("composite", fn, {layers, masks, alpha, alpha0},
                                   1e-5, rtol);
      suite.tally(res.pass, "composite worst " + std::to_string(res.worst));
    }
  }
  return suite;
}

inline SuiteResult run_prop1_suite(int trials = 100, uint64_t seed = 2024) {
  SuiteResult suite;
  suite.name = "proposition1";
  const std::vector<std::pair<int64_t, int64_t>> sizes = {
      {8, 8}, {12, 16}, {16, 12}, {10, 10}};
  auto rep = check_proposition1(trials, sizes, seed);
  std::ostringstream aff, dir, sam;
  aff << "affinity max dev " << rep.max_affinity_dev;
  dir << "dirac shift max dev " << rep.max_dirac_dev;
  sam << "soft-argmax shift max dev " << rep.max_softargmax_dev;
  suite.tally(rep.max_affinity_dev < rep.affinity_tol, aff.str());
  suite.tally(rep.max_dirac_dev < rep.dirac_tol, dir.str());
  suite.tally(rep.max_softargmax_dev < rep.softargmax_tol, sam.str());
  return suite;
}

// Random decompositions in float32 (the training dtype): per-pixel weight
// normalization, activation-scaling homogeneity, and the convex-combination
// bound on the reconstruction.
inline SuiteResult run_compositing_fuzz(int n = 1000, uint64_t seed = 77) {
  SuiteResult suite;
  suite.name = "compositing";
  Rng rng(seed);
  for (int t = 0; t < n; ++t) {
    const int64_t b = rng.randint(1, 3);
    const int64_t k = rng.randint(1, 5);
    const int64_t h = rng.randint(3, 9), w = rng.randint(3, 9);

    auto rnd = [&](Shape shape, double lo, double hi) {
      std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
      for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
      return Tensor<float>::from_data(std::move(shape), std::move(v));
    };
    Tensor<float> layers = rnd({b, k + 1, 3, h, w}, 0.0, 1.0);
    Tensor<float> masks = rnd({b, k, 1, h, w}, 0.0, 1.0);
    std::vector<float> av(static_cast<size_t>(b * k));
    for (auto& a : av) a = static_cast<float>(std::exp(rng.uniform(-3.0, 3.0)));
    Tensor<float> alpha = Tensor<float>::from_data({b, k}, av);
    Tensor<float> alpha0 =
        Tensor<float>::scalar(static_cast<float>(std::exp(rng.uniform(-1.0, 11.0))));

    auto [wts, xhat] = composite(layers, masks, alpha, alpha0);

    double max_sum_dev = 0.0;
    for (int64_t i = 0; i < b; ++i)
      for (int64_t p = 0; p < h * w; ++p) {
        double s = 0.0;
        for (int64_t kk = 0; kk <= k; ++kk)
          s += wts.value()[static_cast<size_t>((i * (k + 1) + kk) * h * w + p)];
        max_sum_dev = std::max(max_sum_dev, std::abs(s - 1.0));
      }
    suite.tally(max_sum_dev < 1e-5, "weight sum dev " + std::to_string(max_sum_dev));

    // homogeneity under a common positive scaling of all activations
    const float c = static_cast<float>(std::exp(rng.uniform(-2.0, 2.0)));
    auto [wts2, xhat2] = composite(layers, mul_scalar(masks, 1.0f), mul_scalar(alpha, c),
                                   mul_scalar(alpha0, c));
    double max_hom_dev = 0.0;
    for (size_t i = 0; i < wts.value().size(); ++i)
      max_hom_dev = std::max(max_hom_dev,
                             static_cast<double>(std::abs(wts.value()[i] - wts2.value()[i])));
    suite.tally(max_hom_dev < 1e-6, "homogeneity dev " + std::to_string(max_hom_dev));

    // convexity: min layer <= xhat <= max layer per pixel and channel
    double max_conv_dev = 0.0;
    for (int64_t i = 0; i < b; ++i)
      for (int64_t ch = 0; ch < 3; ++ch)
        for (int64_t p = 0; p < h * w; ++p) {
          float lo = 1e30f, hi = -1e30f;
          for (int64_t kk = 0; kk <= k; ++kk) {
            const float v = layers.value()[static_cast<size_t>(
                (((i * (k + 1) + kk) * 3 + ch) * h * w) + p)];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
          }
          const float xv = xhat.value()[static_cast<size_t>((i * 3 + ch) * h * w + p)];
          max_conv_dev = std::max(
              {max_conv_dev, static_cast<double>(lo - xv), static_cast<double>(xv - hi)});
        }
    suite.tally(max_conv_dev < 1e-6, "convexity dev " + std::to_string(max_conv_dev));
  }
  return suite;
}

inline SuiteResult run_loss_closed_forms() {
  SuiteResult suite;
  suite.name = "loss-closed-forms";

  // one-hot weights: entropy loss vanishes
  {
    std::vector<double> w(static_cast<size_t>(1 * 3 * 1 * 2 * 2), 0.0);
    for (int p = 0; p < 4; ++p) w[static_cast<size_t>(p % 3) * 4 + static_cast<size_t>(p)] = 1.0;
    auto l = pixel_entropy_loss(Tensor<double>::from_data({1, 3, 1, 2, 2}, w));
    suite.tally(l.item() < 1e-30, "one-hot entropy " + std::to_string(l.item()));
  }
  // uniform over 2 layers: (ln 2)^2 per pixel
  {
    auto w = Tensor<double>::filled({1, 2, 1, 3, 3}, 0.5);
    const double expect = std::log(2.0) * std::log(2.0);
    const double got = pixel_entropy_loss(w).item();
    suite.tally(std::abs(got - expect) < 1e-6, "uniform-2 entropy " + std::to_string(got));
  }
  // uniform over 4 layers: (ln 4)^2
  {
    auto w = Tensor<double>::filled({1, 4, 1, 2, 2}, 0.25);
    const double expect = std::log(4.0) * std::log(4.0);
    const double got = pixel_entropy_loss(w).item();
    suite.tally(std::abs(got - expect) < 1e-6, "uniform-4 entropy " + std::to_string(got));
  }
  // warmup factor fixed points
  suite.tally(pixel_warmup_factor(0, 800) == 0.0, "warmup at 0");
  suite.tally(pixel_warmup_factor(400, 800) == 0.25, "warmup at N/2");
  suite.tally(pixel_warmup_factor(800, 800) == 1.0, "warmup at N");
  suite.tally(pixel_warmup_factor(5000, 800) == 1.0, "warmup beyond N");
  // reconstruction closed form: constant offset 0.1 on all 3 channels
  {
    auto x = Tensor<double>::filled({1, 3, 4, 4}, 0.4);
    auto xhat = Tensor<double>::filled({1, 3, 4, 4}, 0.5);
    const double got = reconstruction_loss(xhat, x).item();
    suite.tally(std::abs(got - 0.09) < 1e-12, "offset-0.1 rec loss " + std::to_string(got));
  }
  {
    auto x = Tensor<double>::filled({1, 3, 2, 2}, 0.3);
    suite.tally(reconstruction_loss(x, x).item() == 0.0, "identical rec loss");
  }
  return suite;
}

}  // namespace astseg
