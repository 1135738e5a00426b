#pragma once

// Spatial primitives: conv2d / transpose_conv2d (im2col + GEMM), group norm,
// batch norm, bilinear grid sampling. Layout is NCHW row-major throughout.

#include <cmath>
#include <cstring>
#include <vector>

#include "astseg/blas.hpp"
#include "astseg/ops.hpp"
#include "astseg/tensor.hpp"

namespace astseg {

namespace detail {

// col: [C*kh*kw, Ho*Wo] patches of one image [C,H,W].
template <typename T>
void im2col(const T* img, int64_t c_in, int64_t h, int64_t w, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo,
            T* col) {
  for (int64_t c = 0; c < c_in; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            std::memset(row + oy * wo, 0, static_cast<size_t>(wo) * sizeof(T));
            continue;
          }
          const T* src = img + (c * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride + kj - pad;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add col back into an image buffer.
template <typename T>
void col2im_add(const T* col, int64_t c_in, int64_t h, int64_t w, int64_t kh,
                int64_t kw, int64_t stride, int64_t pad, int64_t ho, int64_t wo,
                T* img) {
  for (int64_t c = 0; c < c_in; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          const int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (c * h + iy) * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            const int64_t ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// input [B,C,H,W], kernel [O,C,kh,kw], bias [O] (optional undefined).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int64_t stride = 1, int64_t pad = 0) {
  check(input.ndim() == 4, "conv2d input must be [B,C,H,W], got " +
                               shape_str(input.shape()));
  check(kernel.ndim() == 4, "conv2d kernel must be [O,C,kh,kw]");
  const int64_t b = input.size(0), c_in = input.size(1), h = input.size(2),
                w = input.size(3);
  const int64_t c_out = kernel.size(0), kh = kernel.size(2), kw = kernel.size(3);
  check(kernel.size(1) == c_in, "conv2d channel mismatch: input " +
                                    shape_str(input.shape()) + " kernel " +
                                    shape_str(kernel.shape()));
  check(h + 2 * pad >= kh && w + 2 * pad >= kw,
        "conv2d kernel larger than padded input");
  if (bias.defined()) check(bias.numel() == c_out, "conv2d bias size mismatch");
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (w + 2 * pad - kw) / stride + 1;
  const int64_t ck = c_in * kh * kw;

  std::vector<T> out(b * c_out * ho * wo);
  std::vector<T> col(static_cast<size_t>(ck * ho * wo));
  const T* xp = input.value().data();
  const T* kp = kernel.value().data();
  for (int64_t i = 0; i < b; ++i) {
    detail::im2col(xp + i * c_in * h * w, c_in, h, w, kh, kw, stride, pad, ho,
                   wo, col.data());
    gemm(false, false, static_cast<int>(c_out), static_cast<int>(ho * wo),
         static_cast<int>(ck), T(1), kp, static_cast<int>(ck), col.data(),
         static_cast<int>(ho * wo), T(0), out.data() + i * c_out * ho * wo,
         static_cast<int>(ho * wo));
  }
  if (bias.defined()) {
    const auto& bv = bias.value();
    for (int64_t i = 0; i < b; ++i)
      for (int64_t o = 0; o < c_out; ++o) {
        T* dst = out.data() + (i * c_out + o) * ho * wo;
        for (int64_t p = 0; p < ho * wo; ++p) dst[p] += bv[static_cast<size_t>(o)];
      }
  }

  auto px = input.node();
  auto pk = kernel.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> parents{input, kernel};
  if (bias.defined()) parents.push_back(bias);
  return make_op<T>(
      {b, c_out, ho, wo}, std::move(out), parents,
      [px, pk, pb, b, c_in, h, w, c_out, kh, kw, stride, pad, ho, wo,
       ck](TensorNode<T>& n) {
        std::vector<T> col(static_cast<size_t>(ck * ho * wo));
        std::vector<T> dcol(static_cast<size_t>(ck * ho * wo));
        if (px->requires_grad) px->ensure_grad();
        if (pk->requires_grad) pk->ensure_grad();
        for (int64_t i = 0; i < b; ++i) {
          const T* g = n.grad.data() + i * c_out * ho * wo;
          if (pk->requires_grad) {
            detail::im2col(px->value.data() + i * c_in * h * w, c_in, h, w, kh,
                           kw, stride, pad, ho, wo, col.data());
            gemm(false, true, static_cast<int>(c_out), static_cast<int>(ck),
                 static_cast<int>(ho * wo), T(1), g, static_cast<int>(ho * wo),
                 col.data(), static_cast<int>(ho * wo), T(1), pk->grad.data(),
                 static_cast<int>(ck));
          }
          if (px->requires_grad) {
            gemm(true, false, static_cast<int>(ck), static_cast<int>(ho * wo),
                 static_cast<int>(c_out), T(1), pk->value.data(),
                 static_cast<int>(ck), g, static_cast<int>(ho * wo), T(0),
                 dcol.data(), static_cast<int>(ho * wo));
            detail::col2im_add(dcol.data(), c_in, h, w, kh, kw, stride, pad, ho,
                               wo, px->grad.data() + i * c_in * h * w);
          }
        }
        if (pb && pb->requires_grad) {
          pb->ensure_grad();
          for (int64_t i = 0; i < b; ++i)
            for (int64_t o = 0; o < c_out; ++o) {
              const T* g = n.grad.data() + (i * c_out + o) * ho * wo;
              T acc = 0;
              for (int64_t p = 0; p < ho * wo; ++p) acc += g[p];
              pb->grad[static_cast<size_t>(o)] += acc;
            }
        }
      });
}

// Adjoint of conv2d in its input argument, with the same kernel layout
// [O,C,kh,kw]: input [B,O,h,w] -> output [B,C,H,W],
// H = (h-1)*stride - 2*pad + kh. bias has C entries.
template <typename T>
Tensor<T> transpose_conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                           const Tensor<T>& bias, int64_t stride = 1,
                           int64_t pad = 0) {
  check(input.ndim() == 4, "transpose_conv2d input must be [B,O,h,w]");
  check(kernel.ndim() == 4, "transpose_conv2d kernel must be [O,C,kh,kw]");
  const int64_t b = input.size(0), c_out_small = input.size(1),
                h = input.size(2), w = input.size(3);
  const int64_t kh = kernel.size(2), kw = kernel.size(3);
  const int64_t c_in = kernel.size(1);
  check(kernel.size(0) == c_out_small,
        "transpose_conv2d channel mismatch: input " + shape_str(input.shape()) +
            " kernel " + shape_str(kernel.shape()));
  const int64_t ho = (h - 1) * stride - 2 * pad + kh;
  const int64_t wo = (w - 1) * stride - 2 * pad + kw;
  check(ho >= 1 && wo >= 1, "transpose_conv2d output would be empty");
  if (bias.defined())
    check(bias.numel() == c_in, "transpose_conv2d bias size mismatch");
  const int64_t ck = c_in * kh * kw;

  std::vector<T> out(b * c_in * ho * wo, T(0));
  std::vector<T> col(static_cast<size_t>(ck * h * w));
  const T* xp = input.value().data();
  const T* kp = kernel.value().data();
  for (int64_t i = 0; i < b; ++i) {
    // col = K^T [ck, O] x in [O, h*w]
    gemm(true, false, static_cast<int>(ck), static_cast<int>(h * w),
         static_cast<int>(c_out_small), T(1), kp, static_cast<int>(ck),
         xp + i * c_out_small * h * w, static_cast<int>(h * w), T(0), col.data(),
         static_cast<int>(h * w));
    detail::col2im_add(col.data(), c_in, ho, wo, kh, kw, stride, pad, h, w,
                       out.data() + i * c_in * ho * wo);
  }
  if (bias.defined()) {
    const auto& bv = bias.value();
    for (int64_t i = 0; i < b; ++i)
      for (int64_t c = 0; c < c_in; ++c) {
        T* dst = out.data() + (i * c_in + c) * ho * wo;
        for (int64_t p = 0; p < ho * wo; ++p) dst[p] += bv[static_cast<size_t>(c)];
      }
  }

  auto px = input.node();
  auto pk = kernel.node();
  auto pb = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor<T>> parents{input, kernel};
  if (bias.defined()) parents.push_back(bias);
  return make_op<T>(
      {b, c_in, ho, wo}, std::move(out), parents,
      [px, pk, pb, b, c_in, c_out_small, h, w, kh, kw, stride, pad, ho, wo,
       ck](TensorNode<T>& n) {
        std::vector<T> gcol(static_cast<size_t>(ck * h * w));
        if (px->requires_grad) px->ensure_grad();
        if (pk->requires_grad) pk->ensure_grad();
        for (int64_t i = 0; i < b; ++i) {
          const T* g = n.grad.data() + i * c_in * ho * wo;
          detail::im2col(g, c_in, ho, wo, kh, kw, stride, pad, h, w, gcol.data());
          if (px->requires_grad) {
            // dIn = K [O, ck] x gcol [ck, h*w]
            gemm(false, false, static_cast<int>(c_out_small),
                 static_cast<int>(h * w), static_cast<int>(ck), T(1),
                 pk->value.data(), static_cast<int>(ck), gcol.data(),
                 static_cast<int>(h * w), T(1),
                 px->grad.data() + i * c_out_small * h * w,
                 static_cast<int>(h * w));
          }
          if (pk->requires_grad) {
            // dK += in [O, h*w] x gcol^T [h*w, ck]
            gemm(false, true, static_cast<int>(c_out_small),
                 static_cast<int>(ck), static_cast<int>(h * w), T(1),
                 px->value.data() + i * c_out_small * h * w,
                 static_cast<int>(h * w), gcol.data(), static_cast<int>(h * w),
                 T(1), pk->grad.data(), static_cast<int>(ck));
          }
        }
        if (pb && pb->requires_grad) {
          pb->ensure_grad();
          for (int64_t i = 0; i < b; ++i)
            for (int64_t c = 0; c < c_in; ++c) {
              const T* g = n.grad.data() + (i * c_in + c) * ho * wo;
              T acc = 0;
              for (int64_t p = 0; p < ho * wo; ++p) acc += g[p];
              pb->grad[static_cast<size_t>(c)] += acc;
            }
        }
      });
}

// input [B,C,H,W], per-group normalization then per-channel affine.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& input, int64_t groups,
                     const Tensor<T>& scale, const Tensor<T>& shift,
                     T eps = T(1e-5)) {
  check(input.ndim() == 4, "group_norm input must be [B,C,H,W]");
  const int64_t b = input.size(0), c = input.size(1), h = input.size(2),
                w = input.size(3);
  check(groups >= 1 && c % groups == 0,
        "group_norm: channels " + std::to_string(c) + " not divisible by " +
            std::to_string(groups) + " groups");
  check(scale.numel() == c && shift.numel() == c, "group_norm affine size mismatch");
  const int64_t cg = c / groups;       // channels per group
  const int64_t gn = cg * h * w;       // elements per group

  const auto& xv = input.value();
  const auto& sv = scale.value();
  const auto& tv = shift.value();
  std::vector<T> out(xv.size());
  for (int64_t i = 0; i < b; ++i) {
    for (int64_t g = 0; g < groups; ++g) {
      const T* x = xv.data() + (i * c + g * cg) * h * w;
      T mu = 0;
      for (int64_t p = 0; p < gn; ++p) mu += x[p];
      mu /= static_cast<T>(gn);
      T var = 0;
      for (int64_t p = 0; p < gn; ++p) var += (x[p] - mu) * (x[p] - mu);
      var /= static_cast<T>(gn);
      const T inv_sigma = T(1) / std::sqrt(var + eps);
      T* y = out.data() + (i * c + g * cg) * h * w;
      for (int64_t cc = 0; cc < cg; ++cc) {
        const T gamma = sv[static_cast<size_t>(g * cg + cc)];
        const T beta = tv[static_cast<size_t>(g * cg + cc)];
        for (int64_t p = 0; p < h * w; ++p) {
          const T xhat = (x[cc * h * w + p] - mu) * inv_sigma;
          y[cc * h * w + p] = gamma * xhat + beta;
        }
      }
    }
  }

  auto px = input.node();
  auto ps = scale.node();
  auto pt = shift.node();
  return make_op<T>(
      input.shape(), std::move(out), {input, scale, shift},
      [px, ps, pt, b, c, h, w, groups, cg, gn, eps](TensorNode<T>& n) {
        if (px->requires_grad) px->ensure_grad();
        if (ps->requires_grad) ps->ensure_grad();
        if (pt->requires_grad) pt->ensure_grad();
        std::vector<T> xhat(static_cast<size_t>(gn));
        for (int64_t i = 0; i < b; ++i) {
          for (int64_t g = 0; g < groups; ++g) {
            const int64_t base = (i * c + g * cg) * h * w;
            const T* x = px->value.data() + base;
            const T* gr = n.grad.data() + base;
            T mu = 0;
            for (int64_t p = 0; p < gn; ++p) mu += x[p];
            mu /= static_cast<T>(gn);
            T var = 0;
            for (int64_t p = 0; p < gn; ++p) var += (x[p] - mu) * (x[p] - mu);
            var /= static_cast<T>(gn);
            const T inv_sigma = T(1) / std::sqrt(var + eps);
            for (int64_t p = 0; p < gn; ++p) xhat[static_cast<size_t>(p)] = (x[p] - mu) * inv_sigma;
            if (ps->requires_grad || pt->requires_grad) {
              for (int64_t cc = 0; cc < cg; ++cc) {
                T dg = 0, db = 0;
                for (int64_t p = 0; p < h * w; ++p) {
                  dg += gr[cc * h * w + p] * xhat[static_cast<size_t>(cc * h * w + p)];
                  db += gr[cc * h * w + p];
                }
                if (ps->requires_grad) ps->grad[static_cast<size_t>(g * cg + cc)] += dg;
                if (pt->requires_grad) pt->grad[static_cast<size_t>(g * cg + cc)] += db;
              }
            }
            if (px->requires_grad) {
              T m1 = 0, m2 = 0;
              for (int64_t cc = 0; cc < cg; ++cc) {
                const T gamma = ps->value[static_cast<size_t>(g * cg + cc)];
                for (int64_t p = 0; p < h * w; ++p) {
                  const T dxhat = gr[cc * h * w + p] * gamma;
                  m1 += dxhat;
                  m2 += dxhat * xhat[static_cast<size_t>(cc * h * w + p)];
                }
              }
              m1 /= static_cast<T>(gn);
              m2 /= static_cast<T>(gn);
              T* gx = px->grad.data() + base;
              for (int64_t cc = 0; cc < cg; ++cc) {
                const T gamma = ps->value[static_cast<size_t>(g * cg + cc)];
                for (int64_t p = 0; p < h * w; ++p) {
                  const T dxhat = gr[cc * h * w + p] * gamma;
                  gx[cc * h * w + p] +=
                      (dxhat - m1 - xhat[static_cast<size_t>(cc * h * w + p)] * m2) * inv_sigma;
                }
              }
            }
          }
        }
      });
}

// Per-channel batch norm. In training mode normalizes with batch statistics
// and updates the running buffers in place (unbiased variance, torch
// convention); in eval mode uses the running buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& scale,
                     const Tensor<T>& shift, std::vector<T>* running_mean,
                     std::vector<T>* running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  check(input.ndim() == 4, "batch_norm input must be [B,C,H,W]");
  const int64_t b = input.size(0), c = input.size(1), h = input.size(2),
                w = input.size(3);
  check(scale.numel() == c && shift.numel() == c, "batch_norm affine size mismatch");
  check(running_mean && running_var &&
            static_cast<int64_t>(running_mean->size()) == c &&
            static_cast<int64_t>(running_var->size()) == c,
        "batch_norm running stats size mismatch");
  const int64_t cn = b * h * w;  // elements per channel

  const auto& xv = input.value();
  std::vector<T> mu_c(static_cast<size_t>(c)), var_c(static_cast<size_t>(c));
  if (training) {
    for (int64_t ch = 0; ch < c; ++ch) {
      T mu = 0;
      for (int64_t i = 0; i < b; ++i) {
        const T* x = xv.data() + (i * c + ch) * h * w;
        for (int64_t p = 0; p < h * w; ++p) mu += x[p];
      }
      mu /= static_cast<T>(cn);
      T var = 0;
      for (int64_t i = 0; i < b; ++i) {
        const T* x = xv.data() + (i * c + ch) * h * w;
        for (int64_t p = 0; p < h * w; ++p) var += (x[p] - mu) * (x[p] - mu);
      }
      var /= static_cast<T>(cn);
      mu_c[static_cast<size_t>(ch)] = mu;
      var_c[static_cast<size_t>(ch)] = var;
      const T unbiased = cn > 1 ? var * static_cast<T>(cn) / static_cast<T>(cn - 1) : var;
      (*running_mean)[static_cast<size_t>(ch)] =
          (T(1) - momentum) * (*running_mean)[static_cast<size_t>(ch)] + momentum * mu;
      (*running_var)[static_cast<size_t>(ch)] =
          (T(1) - momentum) * (*running_var)[static_cast<size_t>(ch)] + momentum * unbiased;
    }
  } else {
    mu_c = *running_mean;
    var_c = *running_var;
  }

  const auto& sv = scale.value();
  const auto& tv = shift.value();
  std::vector<T> out(xv.size());
  for (int64_t i = 0; i < b; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T inv_sigma = T(1) / std::sqrt(var_c[static_cast<size_t>(ch)] + eps);
      const T gamma = sv[static_cast<size_t>(ch)], beta = tv[static_cast<size_t>(ch)];
      const T mu = mu_c[static_cast<size_t>(ch)];
      const T* x = xv.data() + (i * c + ch) * h * w;
      T* y = out.data() + (i * c + ch) * h * w;
      for (int64_t p = 0; p < h * w; ++p) y[p] = gamma * (x[p] - mu) * inv_sigma + beta;
    }

  auto px = input.node();
  auto ps = scale.node();
  auto pt = shift.node();
  return make_op<T>(
      input.shape(), std::move(out), {input, scale, shift},
      [px, ps, pt, b, c, h, w, cn, mu_c, var_c, training, eps](TensorNode<T>& n) {
        if (px->requires_grad) px->ensure_grad();
        if (ps->requires_grad) ps->ensure_grad();
        if (pt->requires_grad) pt->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch) {
          const T mu = mu_c[static_cast<size_t>(ch)];
          const T inv_sigma = T(1) / std::sqrt(var_c[static_cast<size_t>(ch)] + eps);
          const T gamma = ps->value[static_cast<size_t>(ch)];
          T dg = 0, db = 0, m1 = 0, m2 = 0;
          for (int64_t i = 0; i < b; ++i) {
            const T* x = px->value.data() + (i * c + ch) * h * w;
            const T* g = n.grad.data() + (i * c + ch) * h * w;
            for (int64_t p = 0; p < h * w; ++p) {
              const T xh = (x[p] - mu) * inv_sigma;
              dg += g[p] * xh;
              db += g[p];
              m1 += g[p] * gamma;
              m2 += g[p] * gamma * xh;
            }
          }
          if (ps->requires_grad) ps->grad[static_cast<size_t>(ch)] += dg;
          if (pt->requires_grad) pt->grad[static_cast<size_t>(ch)] += db;
          if (px->requires_grad) {
            m1 /= static_cast<T>(cn);
            m2 /= static_cast<T>(cn);
            for (int64_t i = 0; i < b; ++i) {
              const T* x = px->value.data() + (i * c + ch) * h * w;
              const T* g = n.grad.data() + (i * c + ch) * h * w;
              T* gx = px->grad.data() + (i * c + ch) * h * w;
              for (int64_t p = 0; p < h * w; ++p) {
                const T xh = (x[p] - mu) * inv_sigma;
                const T dxhat = g[p] * gamma;
                if (training)
                  gx[p] += (dxhat - m1 - xh * m2) * inv_sigma;
                else
                  gx[p] += dxhat * inv_sigma;  // stats are constants in eval
              }
            }
          }
        }
      });
}

// Bilinear sampling with zero padding, align-corners convention:
// coordinate -1 is the center of the first pixel, +1 the center of the last.
// Outside pixels read as zero, so the sampled value fades linearly to 0 over
// the one-texel band beyond the border and is exactly 0 past it.
// source [N,C,gh,gw]; gx, gy [N,oh,ow]; result [N,C,oh,ow].
// Differentiable in source and in both coordinate maps.
template <typename T>
Tensor<T> grid_sample(const Tensor<T>& source, const Tensor<T>& gx,
                      const Tensor<T>& gy) {
  check(source.ndim() == 4, "grid_sample source must be [N,C,gh,gw]");
  check(gx.ndim() == 3 && gy.ndim() == 3 && gx.shape() == gy.shape(),
        "grid_sample coordinate maps must be matching [N,oh,ow]");
  const int64_t nb = source.size(0), c = source.size(1), gh = source.size(2),
                gw = source.size(3);
  check(gx.size(0) == nb, "grid_sample batch mismatch");
  const int64_t oh = gx.size(1), ow = gx.size(2);
  check(gh >= 2 && gw >= 2, "grid_sample source must be at least 2x2");

  const auto& sv = source.value();
  const auto& xv = gx.value();
  const auto& yv = gy.value();
  std::vector<T> out(nb * c * oh * ow, T(0));

  const T sx = static_cast<T>(gw - 1) / T(2);
  const T sy = static_cast<T>(gh - 1) / T(2);
  auto tap = [&](const T* img, int64_t yy, int64_t xx) -> T {
    return (yy >= 0 && yy < gh && xx >= 0 && xx < gw) ? img[yy * gw + xx] : T(0);
  };

  for (int64_t i = 0; i < nb; ++i) {
    for (int64_t p = 0; p < oh * ow; ++p) {
      const T u = (xv[static_cast<size_t>(i * oh * ow + p)] + T(1)) * sx;
      const T v = (yv[static_cast<size_t>(i * oh * ow + p)] + T(1)) * sy;
      const int64_t u0 = static_cast<int64_t>(std::floor(u));
      const int64_t v0 = static_cast<int64_t>(std::floor(v));
      const T fu = u - static_cast<T>(u0);
      const T fv = v - static_cast<T>(v0);
      for (int64_t ch = 0; ch < c; ++ch) {
        const T* img = sv.data() + (i * c + ch) * gh * gw;
        const T s00 = tap(img, v0, u0), s01 = tap(img, v0, u0 + 1);
        const T s10 = tap(img, v0 + 1, u0), s11 = tap(img, v0 + 1, u0 + 1);
        out[static_cast<size_t>((i * c + ch) * oh * ow + p)] =
            (T(1) - fv) * ((T(1) - fu) * s00 + fu * s01) +
            fv * ((T(1) - fu) * s10 + fu * s11);
      }
    }
  }

  auto psrc = source.node();
  auto pgx = gx.node();
  auto pgy = gy.node();
  return make_op<T>(
      {nb, c, oh, ow}, std::move(out), {source, gx, gy},
      [psrc, pgx, pgy, nb, c, gh, gw, oh, ow, sx, sy](TensorNode<T>& n) {
        if (psrc->requires_grad) psrc->ensure_grad();
        if (pgx->requires_grad) pgx->ensure_grad();
        if (pgy->requires_grad) pgy->ensure_grad();
        const auto& xv = pgx->value;
        const auto& yv = pgy->value;
        auto tap = [&](const T* img, int64_t yy, int64_t xx) -> T {
          return (yy >= 0 && yy < gh && xx >= 0 && xx < gw) ? img[yy * gw + xx] : T(0);
        };
        for (int64_t i = 0; i < nb; ++i) {
          for (int64_t p = 0; p < oh * ow; ++p) {
            const T u = (xv[static_cast<size_t>(i * oh * ow + p)] + T(1)) * sx;
            const T v = (yv[static_cast<size_t>(i * oh * ow + p)] + T(1)) * sy;
            const int64_t u0 = static_cast<int64_t>(std::floor(u));
            const int64_t v0 = static_cast<int64_t>(std::floor(v));
            const T fu = u - static_cast<T>(u0);
            const T fv = v - static_cast<T>(v0);
            T du_acc = 0, dv_acc = 0;
            for (int64_t ch = 0; ch < c; ++ch) {
              const T g = n.grad[static_cast<size_t>((i * c + ch) * oh * ow + p)];
              if (g == T(0)) continue;
              const T* img = psrc->value.data() + (i * c + ch) * gh * gw;
              const T s00 = tap(img, v0, u0), s01 = tap(img, v0, u0 + 1);
              const T s10 = tap(img, v0 + 1, u0), s11 = tap(img, v0 + 1, u0 + 1);
              if (psrc->requires_grad) {
                T* gimg = psrc->grad.data() + (i * c + ch) * gh * gw;
                auto put = [&](int64_t yy, int64_t xx, T wgt) {
                  if (yy >= 0 && yy < gh && xx >= 0 && xx < gw)
                    gimg[yy * gw + xx] += g * wgt;
                };
                put(v0, u0, (T(1) - fv) * (T(1) - fu));
                put(v0, u0 + 1, (T(1) - fv) * fu);
                put(v0 + 1, u0, fv * (T(1) - fu));
                put(v0 + 1, u0 + 1, fv * fu);
              }
              du_acc += g * ((T(1) - fv) * (s01 - s00) + fv * (s11 - s10));
              dv_acc += g * ((T(1) - fu) * (s10 - s00) + fu * (s11 - s01));
            }
            if (pgx->requires_grad)
              pgx->grad[static_cast<size_t>(i * oh * ow + p)] += du_acc * sx;
            if (pgy->requires_grad)
              pgy->grad[static_cast<size_t>(i * oh * ow + p)] += dv_acc * sy;
          }
        }
      });
}

// Single-image convenience wrapper: source [C,g,g], grid [h,w,2] with
// (x, y) order in the last axis; result [C,h,w].
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& source, const Tensor<T>& grid) {
  check(source.ndim() == 3, "grid_sample_bilinear source must be [C,g,g]");
  check(grid.ndim() == 3 && grid.size(-1) == 2,
        "grid_sample_bilinear grid must be [h,w,2]");
  for (T v : grid.value())
    check(std::isfinite(v), "grid_sample_bilinear: non-finite grid coordinate");
  const int64_t h = grid.size(0), w = grid.size(1);
  Tensor<T> src4 = reshape(source, {1, source.size(0), source.size(1), source.size(2)});
  Tensor<T> gx = reshape(narrow(grid, 2, 0, 1), {1, h, w});
  Tensor<T> gy = reshape(narrow(grid, 2, 1, 1), {1, h, w});
  Tensor<T> out = grid_sample(src4, gx, gy);
  return reshape(out, {source.size(0), h, w});
}

}  // namespace astseg
