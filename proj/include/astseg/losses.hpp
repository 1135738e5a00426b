#pragma once

// Training losses: squared local-L1 reconstruction error, squared pixel
// entropy of the layer weights, and their warmup-weighted composition.

#include <algorithm>
#include <cmath>

#include "astseg/ops.hpp"

namespace astseg {

inline constexpr double kEntropyEps = 1e-20;

// l(i,j) = sum_c |xhat - x|; loss = mean over pixels of l^2.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& xhat, const Tensor<T>& x) {
  check(xhat.shape() == x.shape(), "reconstruction_loss shape mismatch: " +
                                       shape_str(xhat.shape()) + " vs " +
                                       shape_str(x.shape()));
  check(xhat.ndim() == 4 && xhat.size(1) == 3,
        "reconstruction_loss expects [B,3,h,w]");
  Tensor<T> l = sum(abs(sub(xhat, x)), {1});  // [B,h,w]
  return mean(mul(l, l));
}

// loss = mean over pixels of (sum_k w_k log(w_k + eps))^2. Zero exactly for
// one-hot weight rows (up to eps), positive otherwise.
template <typename T>
Tensor<T> pixel_entropy_loss(const Tensor<T>& weights) {
  check(weights.ndim() == 5 && weights.size(2) == 1,
        "pixel_entropy_loss expects weights [B,K+1,1,h,w]");
  Tensor<T> w = reshape(weights, {weights.size(0), weights.size(1),
                                  weights.size(3), weights.size(4)});
  Tensor<T> inner = sum(mul(w, log(add_scalar(w, static_cast<T>(kEntropyEps)))), {1});
  return mean(mul(inner, inner));
}

inline double pixel_warmup_factor(int64_t step, int64_t n_pixel) {
  const double f = n_pixel > 0
                       ? std::min(1.0, static_cast<double>(step) / static_cast<double>(n_pixel))
                       : 1.0;
  return f * f;
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double l_rec = 0.0;
  double l_pixel = 0.0;
  double warmup_factor = 0.0;
};

// total = L_rec + min(1, step/N_pixel)^2 * lambda_pixel * L_pixel
template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& xhat, const Tensor<T>& x,
                            const Tensor<T>& weights, int64_t step,
                            int64_t n_pixel, double lambda_pixel) {
  check(step >= 0, "total_loss: step must be >= 0");
  LossBreakdown<T> out;
  Tensor<T> rec = reconstruction_loss(xhat, x);
  Tensor<T> pix = pixel_entropy_loss(weights);
  out.warmup_factor = pixel_warmup_factor(step, n_pixel);
  out.l_rec = static_cast<double>(rec.item());
  out.l_pixel = static_cast<double>(pix.item());
  out.total = add(rec, mul_scalar(pix, static_cast<T>(out.warmup_factor * lambda_pixel)));
  return out;
}

}  // namespace astseg
