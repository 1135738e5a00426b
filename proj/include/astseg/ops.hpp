#pragma once

// Differentiable primitives on Tensor<T>: pointwise arithmetic, reductions,
// shape surgery, matmul, softmax, layer norm. Broadcasting follows one rule
// everywhere: shapes are aligned on trailing dimensions and only size-1
// dimensions stretch.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "astseg/blas.hpp"
#include "astseg/tensor.hpp"

namespace astseg {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t nd = std::max(a.size(), b.size());
  Shape out(nd);
  for (size_t i = 0; i < nd; ++i) {
    const int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    check(da == db || da == 1 || db == 1,
          "shapes " + shape_str(a) + " and " + shape_str(b) +
              " are not broadcast-compatible");
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides for reading `in` at every index of `out` (0 where `in` broadcasts).
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  const auto in_st = contiguous_strides(in);
  const size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i)
    st[off + i] = in[i] == 1 ? 0 : in_st[i];
  return st;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& t, const Shape& target) {
  if (t.shape() == target) return t;
  check(broadcast_shape(t.shape(), target) == target,
        "cannot broadcast " + shape_str(t.shape()) + " to " + shape_str(target));
  const auto strides = broadcast_strides(t.shape(), target);
  std::vector<T> out(shape_numel(target));
  const auto& in = t.value();
  detail::for_each_mapped(target, strides, 0,
                          [&](int64_t o, int64_t i) { out[o] = in[i]; });
  auto pt = t.node();
  Shape tgt = target;
  return make_op<T>(
      Shape(target), std::move(out), {t}, [pt, tgt, strides](TensorNode<T>& n) {
        pt->ensure_grad();
        auto& g = pt->grad;
        detail::for_each_mapped(tgt, strides, 0,
                                [&](int64_t o, int64_t i) { g[i] += n.grad[o]; });
      });
}

namespace detail {

template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& a, F f, DF df) {
  const auto& av = a.value();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa, df](TensorNode<T>& n) {
    pa->ensure_grad();
    for (size_t i = 0; i < n.value.size(); ++i)
      pa->grad[i] += df(n.grad[i], pa->value[i], n.value[i]);
  });
}

// dfa/dfb: (grad_out, a, b, out) -> grad contribution. Shapes already equal.
template <typename T, typename F, typename DFA, typename DFB>
Tensor<T> binary_same(const Tensor<T>& a, const Tensor<T>& b, F f, DFA dfa,
                      DFB dfb) {
  check(a.shape() == b.shape(), "internal: binary_same shape mismatch");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  auto pa = a.node();
  auto pb = b.node();
  return make_op<T>(a.shape(), std::move(out), {a, b},
                    [pa, pb, dfa, dfb](TensorNode<T>& n) {
                      if (pa->requires_grad) {
                        pa->ensure_grad();
                        for (size_t i = 0; i < n.value.size(); ++i)
                          pa->grad[i] +=
                              dfa(n.grad[i], pa->value[i], pb->value[i], n.value[i]);
                      }
                      if (pb->requires_grad) {
                        pb->ensure_grad();
                        for (size_t i = 0; i < n.value.size(); ++i)
                          pb->grad[i] +=
                              dfb(n.grad[i], pa->value[i], pb->value[i], n.value[i]);
                      }
                    });
}

template <typename T, typename F, typename DFA, typename DFB>
Tensor<T> binary_broadcast(const Tensor<T>& a, const Tensor<T>& b, F f, DFA dfa,
                           DFB dfb) {
  if (a.shape() == b.shape()) return binary_same(a, b, f, dfa, dfb);
  const Shape out = broadcast_shape(a.shape(), b.shape());
  return binary_same(broadcast_to(a, out), broadcast_to(b, out), f, dfa, dfb);
}

}  // namespace detail

// ---- pointwise arithmetic ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast(
      a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast(
      a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast(
      a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y, T) { return g * y; }, [](T g, T x, T, T) { return g * x; });
}

template <typename T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast(
      a, b, [](T x, T y) { return x / y; },
      [](T g, T, T y, T) { return g / y; },
      [](T g, T, T y, T out) { return -g * out / y; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return -x; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary_op(
      a, [c](T x) { return x + c; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return detail::unary_op(
      a, [c](T x) { return x * c; }, [c](T g, T, T) { return g * c; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return divide(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

// ---- pointwise nonlinearities ----

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::exp(x); },
      [](T g, T, T out) { return g * out; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::log(x); }, [](T g, T x, T) { return g / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::sqrt(x); },
      [](T g, T, T out) { return g / (T(2) * out); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::abs(x); },
      [](T g, T x, T) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op(
      a,
      [](T x) {
        // stable in both tails
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                         : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T g, T, T out) { return g * out * (T(1) - out); });
}

// CELU with alpha = 1: x for x >= 0, exp(x) - 1 otherwise.
template <typename T>
Tensor<T> celu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x >= T(0) ? x : std::exp(x) - T(1); },
      [](T g, T x, T out) { return x >= T(0) ? g : g * (out + T(1)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T g, T x, T) { return x > T(0) ? g : T(0); });
}

// Subgradient convention: gradient passes through on [lo, hi] (inclusive)
// and is zero outside.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  check(lo <= hi, "clamp: lo > hi");
  return detail::unary_op(
      a, [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](T g, T x, T) { return (x >= lo && x <= hi) ? g : T(0); });
}

// ---- reductions ----

namespace detail {

inline Shape reduced_shape(const Shape& in, const std::vector<int>& axes,
                           bool keepdim) {
  std::vector<bool> drop(in.size(), false);
  for (int a : axes) {
    int ax = a < 0 ? a + static_cast<int>(in.size()) : a;
    check(ax >= 0 && ax < static_cast<int>(in.size()), "reduce axis out of range");
    drop[static_cast<size_t>(ax)] = true;
  }
  Shape out;
  for (size_t i = 0; i < in.size(); ++i) {
    if (drop[i]) {
      if (keepdim) out.push_back(1);
    } else {
      out.push_back(in[i]);
    }
  }
  return out;
}

// Strides of the (keepdim) output viewed at every input index.
inline std::vector<int64_t> reduce_strides(const Shape& in,
                                           const std::vector<int>& axes) {
  Shape kept = reduced_shape(in, axes, /*keepdim=*/true);
  return broadcast_strides(kept, in);
}

}  // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& a, const std::vector<int>& axes, bool keepdim = false) {
  const Shape out_shape = detail::reduced_shape(a.shape(), axes, keepdim);
  const auto strides = detail::reduce_strides(a.shape(), axes);
  std::vector<T> out(shape_numel(out_shape), T(0));
  const auto& av = a.value();
  detail::for_each_mapped(a.shape(), strides, 0,
                          [&](int64_t i, int64_t o) { out[o] += av[i]; });
  auto pa = a.node();
  Shape in_shape = a.shape();
  return make_op<T>(out_shape, std::move(out), {a},
                    [pa, in_shape, strides](TensorNode<T>& n) {
                      pa->ensure_grad();
                      auto& g = pa->grad;
                      detail::for_each_mapped(
                          in_shape, strides, 0,
                          [&](int64_t i, int64_t o) { g[i] += n.grad[o]; });
                    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const auto& av = a.value();
  T acc = 0;
  for (T v : av) acc += v;
  auto pa = a.node();
  return make_op<T>({}, {acc}, {a}, [pa](TensorNode<T>& n) {
    pa->ensure_grad();
    const T g = n.grad[0];
    for (auto& gi : pa->grad) gi += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, const std::vector<int>& axes, bool keepdim = false) {
  int64_t count = 1;
  for (int ax : axes) {
    int x = ax < 0 ? ax + a.ndim() : ax;
    count *= a.shape()[static_cast<size_t>(x)];
  }
  return mul_scalar(sum(a, axes, keepdim), T(1) / static_cast<T>(count));
}

// ---- shape surgery ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  check(shape_numel(shape) == a.numel(),
        "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
            " changes element count");
  auto pa = a.node();
  std::vector<T> out = a.value();
  return make_op<T>(std::move(shape), std::move(out), {a}, [pa](TensorNode<T>& n) {
    pa->ensure_grad();
    for (size_t i = 0; i < n.value.size(); ++i) pa->grad[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& perm) {
  check(perm.size() == a.shape().size(), "permute rank mismatch");
  Shape out_shape(perm.size());
  const auto in_strides = contiguous_strides(a.shape());
  std::vector<int64_t> mapped(perm.size());
  for (size_t d = 0; d < perm.size(); ++d) {
    out_shape[d] = a.shape()[static_cast<size_t>(perm[d])];
    mapped[d] = in_strides[static_cast<size_t>(perm[d])];
  }
  std::vector<T> out(a.numel());
  const auto& av = a.value();
  detail::for_each_mapped(out_shape, mapped, 0,
                          [&](int64_t o, int64_t i) { out[o] = av[i]; });
  auto pa = a.node();
  return make_op<T>(out_shape, std::move(out), {a},
                    [pa, out_shape, mapped](TensorNode<T>& n) {
                      pa->ensure_grad();
                      auto& g = pa->grad;
                      detail::for_each_mapped(
                          out_shape, mapped, 0,
                          [&](int64_t o, int64_t i) { g[i] += n.grad[o]; });
                    });
}

// Contiguous slice along one axis.
template <typename T>
Tensor<T> narrow(const Tensor<T>& a, int axis, int64_t start, int64_t length) {
  if (axis < 0) axis += a.ndim();
  check(axis >= 0 && axis < a.ndim(), "narrow axis out of range");
  const int64_t dim = a.shape()[static_cast<size_t>(axis)];
  check(start >= 0 && length >= 0 && start + length <= dim,
        "narrow range [" + std::to_string(start) + "," +
            std::to_string(start + length) + ") exceeds dim " + std::to_string(dim));
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = length;
  const auto in_strides = contiguous_strides(a.shape());
  const int64_t offset = start * in_strides[static_cast<size_t>(axis)];
  std::vector<T> out(shape_numel(out_shape));
  const auto& av = a.value();
  detail::for_each_mapped(out_shape, in_strides, offset,
                          [&](int64_t o, int64_t i) { out[o] = av[i]; });
  auto pa = a.node();
  return make_op<T>(out_shape, std::move(out), {a},
                    [pa, out_shape, in_strides, offset](TensorNode<T>& n) {
                      pa->ensure_grad();
                      auto& g = pa->grad;
                      detail::for_each_mapped(
                          out_shape, in_strides, offset,
                          [&](int64_t o, int64_t i) { g[i] += n.grad[o]; });
                    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  check(!parts.empty(), "concat of zero tensors");
  if (axis < 0) axis += parts[0].ndim();
  Shape out_shape = parts[0].shape();
  check(axis >= 0 && axis < static_cast<int>(out_shape.size()),
        "concat axis out of range");
  int64_t total = 0;
  for (const auto& p : parts) {
    check(p.ndim() == static_cast<int>(out_shape.size()), "concat rank mismatch");
    for (int d = 0; d < p.ndim(); ++d)
      check(d == axis || p.shape()[static_cast<size_t>(d)] == out_shape[static_cast<size_t>(d)],
            "concat shape mismatch at dim " + std::to_string(d));
    total += p.shape()[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = total;

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (size_t d = static_cast<size_t>(axis) + 1; d < out_shape.size(); ++d)
    inner *= out_shape[d];

  std::vector<T> out(shape_numel(out_shape));
  const int64_t out_block = total * inner;
  int64_t at = 0;
  std::vector<int64_t> part_dims;
  for (const auto& p : parts) {
    const int64_t dim = p.shape()[static_cast<size_t>(axis)];
    part_dims.push_back(dim);
    const auto& pv = p.value();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_block + at * inner,
                  pv.data() + o * dim * inner,
                  static_cast<size_t>(dim * inner) * sizeof(T));
    at += dim;
  }

  std::vector<std::shared_ptr<TensorNode<T>>> pnodes;
  for (const auto& p : parts) pnodes.push_back(p.node());
  return make_op<T>(out_shape, std::move(out), parts,
                    [pnodes, part_dims, outer, inner, out_block](TensorNode<T>& n) {
                      int64_t at2 = 0;
                      for (size_t k = 0; k < pnodes.size(); ++k) {
                        const int64_t dim = part_dims[k];
                        if (pnodes[k]->requires_grad) {
                          pnodes[k]->ensure_grad();
                          auto& g = pnodes[k]->grad;
                          for (int64_t o = 0; o < outer; ++o) {
                            const T* src = n.grad.data() + o * out_block + at2 * inner;
                            T* dst = g.data() + o * dim * inner;
                            for (int64_t i = 0; i < dim * inner; ++i) dst[i] += src[i];
                          }
                        }
                        at2 += dim;
                      }
                    });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& a, int axis,
                             const std::vector<int64_t>& sizes) {
  if (axis < 0) axis += a.ndim();
  std::vector<Tensor<T>> out;
  int64_t at = 0;
  for (int64_t s : sizes) {
    out.push_back(narrow(a, axis, at, s));
    at += s;
  }
  check(at == a.shape()[static_cast<size_t>(axis)],
        "split sizes do not cover the axis");
  return out;
}

// ---- matmul ----

// a: [*, m, k]; b: [*, k, n] or [k, n] (shared across the batch).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.ndim() >= 2 && b.ndim() >= 2, "matmul needs rank >= 2");
  const int64_t m = a.size(-2), k = a.size(-1);
  check(b.size(-2) == k, "matmul inner dims differ: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
  const int64_t n = b.size(-1);
  const bool b_shared = b.ndim() == 2;
  Shape batch_shape(a.shape().begin(), a.shape().end() - 2);
  if (!b_shared) {
    Shape bb(b.shape().begin(), b.shape().end() - 2);
    check(bb == batch_shape, "matmul batch dims differ");
  }
  const int64_t batch = shape_numel(batch_shape);
  Shape out_shape = batch_shape;
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<T> out(batch * m * n);
  const T* ap = a.value().data();
  const T* bp = b.value().data();
  for (int64_t i = 0; i < batch; ++i)
    gemm(false, false, static_cast<int>(m), static_cast<int>(n),
         static_cast<int>(k), T(1), ap + i * m * k, static_cast<int>(k),
         b_shared ? bp : bp + i * k * n, static_cast<int>(n), T(0),
         out.data() + i * m * n, static_cast<int>(n));

  auto pa = a.node();
  auto pb = b.node();
  return make_op<T>(out_shape, std::move(out), {a, b},
                    [pa, pb, batch, m, n, k, b_shared](TensorNode<T>& n_) {
                      const T* g = n_.grad.data();
                      if (pa->requires_grad) {
                        pa->ensure_grad();
                        const T* bp2 = pb->value.data();
                        for (int64_t i = 0; i < batch; ++i)
                          gemm(false, true, static_cast<int>(m), static_cast<int>(k),
                               static_cast<int>(n), T(1), g + i * m * n,
                               static_cast<int>(n),
                               b_shared ? bp2 : bp2 + i * k * n, static_cast<int>(n),
                               T(1), pa->grad.data() + i * m * k, static_cast<int>(k));
                      }
                      if (pb->requires_grad) {
                        pb->ensure_grad();
                        const T* ap2 = pa->value.data();
                        for (int64_t i = 0; i < batch; ++i)
                          gemm(true, false, static_cast<int>(k), static_cast<int>(n),
                               static_cast<int>(m), T(1), ap2 + i * m * k,
                               static_cast<int>(k), g + i * m * n, static_cast<int>(n),
                               T(1),
                               b_shared ? pb->grad.data() : pb->grad.data() + i * k * n,
                               static_cast<int>(n));
                      }
                    });
}

// x: [..., in]; w: [in, out]; bias: [out] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  Shape lead(x.shape().begin(), x.shape().end() - 1);
  const int64_t in = x.size(-1);
  Tensor<T> flat = reshape(x, {shape_numel(lead), in});
  Tensor<T> y = matmul(flat, w);
  if (bias.defined()) y = add(y, bias);
  Shape out_shape = lead;
  out_shape.push_back(w.size(-1));
  return reshape(y, out_shape);
}

// ---- softmax over the last axis ----

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  check(a.ndim() >= 1, "softmax needs rank >= 1");
  const int64_t d = a.size(-1);
  const int64_t rows = a.numel() / d;
  const auto& av = a.value();
  std::vector<T> out(av.size());
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * d;
    T* y = out.data() + r * d;
    T mx = x[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
    T z = 0;
    for (int64_t i = 0; i < d; ++i) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    }
    const T inv = T(1) / z;
    for (int64_t i = 0; i < d; ++i) y[i] *= inv;
  }
  auto pa = a.node();
  return make_op<T>(a.shape(), std::move(out), {a}, [pa, rows, d](TensorNode<T>& n) {
    pa->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const T* y = n.value.data() + r * d;
      const T* g = n.grad.data() + r * d;
      T* gx = pa->grad.data() + r * d;
      T dot = 0;
      for (int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
      for (int64_t i = 0; i < d; ++i) gx[i] += y[i] * (g[i] - dot);
    }
  });
}

// ---- layer norm over the last axis ----

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  const int64_t d = x.size(-1);
  check(gamma.numel() == d && beta.numel() == d, "layer_norm affine size mismatch");
  const int64_t rows = x.numel() / d;
  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  std::vector<T> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const T* xp = xv.data() + r * d;
    T* yp = out.data() + r * d;
    T mu = 0;
    for (int64_t i = 0; i < d; ++i) mu += xp[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int64_t i = 0; i < d; ++i) var += (xp[i] - mu) * (xp[i] - mu);
    var /= static_cast<T>(d);
    const T inv_sigma = T(1) / std::sqrt(var + eps);
    for (int64_t i = 0; i < d; ++i)
      yp[i] = gv[i] * ((xp[i] - mu) * inv_sigma) + bv[i];
  }
  auto px = x.node();
  auto pg = gamma.node();
  auto pb = beta.node();
  return make_op<T>(
      x.shape(), std::move(out), {x, gamma, beta},
      [px, pg, pb, rows, d, eps](TensorNode<T>& n) {
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        std::vector<T> xhat(static_cast<size_t>(d));
        for (int64_t r = 0; r < rows; ++r) {
          const T* xp = px->value.data() + r * d;
          const T* g = n.grad.data() + r * d;
          T mu = 0;
          for (int64_t i = 0; i < d; ++i) mu += xp[i];
          mu /= static_cast<T>(d);
          T var = 0;
          for (int64_t i = 0; i < d; ++i) var += (xp[i] - mu) * (xp[i] - mu);
          var /= static_cast<T>(d);
          const T inv_sigma = T(1) / std::sqrt(var + eps);
          for (int64_t i = 0; i < d; ++i) xhat[static_cast<size_t>(i)] = (xp[i] - mu) * inv_sigma;
          if (pg->requires_grad)
            for (int64_t i = 0; i < d; ++i)
              pg->grad[static_cast<size_t>(i)] += g[i] * xhat[static_cast<size_t>(i)];
          if (pb->requires_grad)
            for (int64_t i = 0; i < d; ++i) pb->grad[static_cast<size_t>(i)] += g[i];
          if (px->requires_grad) {
            T m1 = 0, m2 = 0;
            const auto& gammav = pg->value;
            for (int64_t i = 0; i < d; ++i) {
              const T dxhat = g[i] * gammav[static_cast<size_t>(i)];
              m1 += dxhat;
              m2 += dxhat * xhat[static_cast<size_t>(i)];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            T* gx = px->grad.data() + r * d;
            for (int64_t i = 0; i < d; ++i) {
              const T dxhat = g[i] * gammav[static_cast<size_t>(i)];
              gx[i] += (dxhat - m1 - xhat[static_cast<size_t>(i)] * m2) * inv_sigma;
            }
          }
        }
      });
}

// Mask-based dropout; identity when p == 0. The mask is drawn by the caller
// so evaluation stays deterministic.
template <typename T>
Tensor<T> dropout_mask_apply(const Tensor<T>& x, const Tensor<T>& mask) {
  return mul(x, mask);
}

}  // namespace astseg
