#pragma once

// Parameterized layers built on the tensor primitives. Layers register their
// tensors in a ParamStore under dotted names so checkpointing and freezing
// work by prefix.

#include <string>
#include <vector>

#include "astseg/conv.hpp"
#include "astseg/ops.hpp"
#include "astseg/params.hpp"

namespace astseg {

inline int64_t norm_groups_for(int64_t channels) {
  if (channels % 4 == 0) return 4;
  if (channels % 2 == 0) return 2;
  return 1;
}

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int64_t stride = 1, pad = 0;

  static Conv2dLayer create(ParamStore<T>& store, const std::string& prefix,
                            int64_t c_in, int64_t c_out, int64_t k,
                            int64_t stride, int64_t pad, Rng& rng) {
    Conv2dLayer l;
    l.stride = stride;
    l.pad = pad;
    const int64_t fan_in = c_in * k * k;
    l.w = store.add(prefix + ".w", uniform_init<T>({c_out, c_in, k, k}, fan_in, rng));
    l.b = store.add(prefix + ".b", uniform_init<T>({c_out}, fan_in, rng));
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct TransposeConv2dLayer {
  Tensor<T> w, b;  // w is [c_in, c_out, k, k]
  int64_t stride = 1, pad = 0;

  static TransposeConv2dLayer create(ParamStore<T>& store, const std::string& prefix,
                                     int64_t c_in, int64_t c_out, int64_t k,
                                     int64_t stride, int64_t pad, Rng& rng) {
    TransposeConv2dLayer l;
    l.stride = stride;
    l.pad = pad;
    const int64_t fan_in = c_in * k * k;
    l.w = store.add(prefix + ".w", uniform_init<T>({c_in, c_out, k, k}, fan_in, rng));
    l.b = store.add(prefix + ".b", uniform_init<T>({c_out}, fan_in, rng));
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return transpose_conv2d(x, w, b, stride, pad);
  }
};

// Group norm by default; batch norm (with running stats buffers) when the
// configuration asks for the exact reference architecture.
template <typename T>
struct Norm2dLayer {
  bool use_batch = false;
  int64_t groups = 1;
  Tensor<T> scale, shift;
  Tensor<T> run_mean, run_var;  // buffers, batch mode only

  static Norm2dLayer create(ParamStore<T>& store, const std::string& prefix,
                            int64_t channels, bool use_batch,
                            int64_t groups = 0) {
    Norm2dLayer l;
    l.use_batch = use_batch;
    l.groups = groups > 0 ? groups : norm_groups_for(channels);
    l.scale = store.add(prefix + ".scale", Tensor<T>::filled({channels}, T(1)));
    l.shift = store.add(prefix + ".shift", Tensor<T>::zeros({channels}));
    if (use_batch) {
      l.run_mean = store.add_buffer(prefix + ".run_mean", Tensor<T>::zeros({channels}));
      l.run_var = store.add_buffer(prefix + ".run_var", Tensor<T>::filled({channels}, T(1)));
    }
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) const {
    if (use_batch) {
      Tensor<T> rm = run_mean, rv = run_var;  // handles share storage
      return batch_norm(x, scale, shift, &rm.value(), &rv.value(), training);
    }
    return group_norm(x, groups, scale, shift);
  }
};

template <typename T>
struct LinearLayer {
  Tensor<T> w, b;  // w is [in, out]

  static LinearLayer create(ParamStore<T>& store, const std::string& prefix,
                            int64_t in, int64_t out, Rng& rng) {
    LinearLayer l;
    l.w = store.add(prefix + ".w", uniform_init<T>({in, out}, in, rng));
    l.b = store.add(prefix + ".b", uniform_init<T>({out}, in, rng));
    return l;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, w, b); }
};

}  // namespace astseg
