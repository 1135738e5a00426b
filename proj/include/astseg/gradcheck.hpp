#pragma once

// Finite-difference gradient verification. Always runs in double precision:
// the analytic gradients of a scalar-valued function of several tensors are
// compared element-wise against central differences.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "astseg/conv.hpp"
#include "astseg/ops.hpp"
#include "astseg/rng.hpp"
#include "astseg/tensor.hpp"

namespace astseg {

struct GradCheckResult {
  std::string op;
  std::vector<double> max_rel_err;  // one entry per checked input
  double worst = 0.0;
  bool pass = false;
  double rtol = 0.0;
};

using ScalarFn = std::function<Tensor<double>(std::vector<Tensor<double>>&)>;

// Central-difference check of `fn` (which must reduce to a scalar) at the
// given inputs. Relative error uses max(|analytic|, |numeric|, 1) as the
// denominator so near-zero gradients are judged absolutely.
inline GradCheckResult gradient_check_fn(const std::string& op_name, ScalarFn fn,
                                         std::vector<Tensor<double>> inputs,
                                         double step = 1e-4, double rtol = 1e-4) {
  GradCheckResult res;
  res.op = op_name;
  res.rtol = rtol;

  for (auto& in : inputs) in.set_requires_grad(true);
  for (auto& in : inputs) in.zero_grad();
  Tensor<double> out = fn(inputs);
  check(out.numel() == 1, "gradient_check: function did not reduce to a scalar");
  backward(out);

  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) analytic.push_back(in.grad());

  for (size_t k = 0; k < inputs.size(); ++k) {
    auto& data = inputs[k].value();
    double max_err = 0.0;
    for (size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      double fp, fm;
      {
        NoGradGuard ng;
        data[i] = orig + step;
        fp = fn(inputs).item();
        data[i] = orig - step;
        fm = fn(inputs).item();
        data[i] = orig;
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
    res.max_rel_err.push_back(max_err);
    res.worst = std::max(res.worst, max_err);
  }
  res.pass = res.worst < rtol;
  return res;
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_data(std::move(shape), std::move(v));
}

// Project through a fixed random tensor before the final sum so that
// symmetric outputs cannot hide wrong gradients.
inline ScalarFn projected(std::function<Tensor<double>(std::vector<Tensor<double>>&)> op,
                          uint64_t proj_seed) {
  return [op, proj_seed](std::vector<Tensor<double>>& ins) {
    Tensor<double> y = op(ins);
    Rng prng(mix_seed(proj_seed, 0x9ull));
    std::vector<double> w(static_cast<size_t>(y.numel()));
    for (auto& x : w) x = prng.uniform(-1.0, 1.0);
    Tensor<double> proj = Tensor<double>::from_data(y.shape(), std::move(w));
    return sum(mul(y, proj));
  };
}

}  // namespace detail

// Named dispatch over the library's differentiable operations, used by the
// verification CLI. Each op is checked at pseudo-random inputs derived from
// `seed`; non-differentiable points (clamp boundaries, abs at 0, grid cell
// edges) are avoided by construction.
inline GradCheckResult gradient_check(const std::string& op_name, uint64_t seed,
                                      double step = 1e-4, double rtol = 1e-4);

namespace detail {

struct NamedOp {
  const char* name;
  GradCheckResult (*run)(uint64_t seed, double step, double rtol);
};

template <typename Builder>
GradCheckResult run_named(const char* name, Builder build, uint64_t seed,
                          double step, double rtol) {
  Rng rng(mix_seed(seed, splitmix64(std::hash<std::string>{}(name))));
  std::vector<Tensor<double>> inputs;
  ScalarFn fn = build(rng, inputs);
  return gradient_check_fn(name, fn, inputs, step, rtol);
}

}  // namespace detail

inline const std::vector<std::string>& gradient_check_op_names();

inline GradCheckResult gradient_check(const std::string& op_name, uint64_t seed,
                                      double step, double rtol) {
  using detail::projected;
  using detail::random_tensor;
  using detail::run_named;
  using V = std::vector<Tensor<double>>;

  if (op_name == "add")
    return run_named("add", [](Rng& r, V& in) {
      in = {random_tensor({3, 4}, r), random_tensor({4}, r)};
      return projected([](V& i) { return add(i[0], i[1]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "sub")
    return run_named("sub", [](Rng& r, V& in) {
      in = {random_tensor({3, 4}, r), random_tensor({3, 4}, r)};
      return projected([](V& i) { return sub(i[0], i[1]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "mul")
    return run_named("mul", [](Rng& r, V& in) {
      in = {random_tensor({2, 3, 2}, r), random_tensor({3, 1}, r)};
      return projected([](V& i) { return mul(i[0], i[1]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "div")
    return run_named("div", [](Rng& r, V& in) {
      in = {random_tensor({3, 4}, r), random_tensor({3, 4}, r, 0.5, 2.0)};
      return projected([](V& i) { return divide(i[0], i[1]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "matmul")
    return run_named("matmul", [](Rng& r, V& in) {
      in = {random_tensor({2, 3, 4}, r), random_tensor({2, 4, 5}, r)};
      return projected([](V& i) { return matmul(i[0], i[1]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "exp")
    return run_named("exp", [](Rng& r, V& in) {
      in = {random_tensor({3, 3}, r)};
      return projected([](V& i) { return exp(i[0]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "log")
    return run_named("log", [](Rng& r, V& in) {
      in = {random_tensor({3, 3}, r, 0.2, 3.0)};
      return projected([](V& i) { return log(i[0]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "sqrt")
    return run_named("sqrt", [](Rng& r, V& in) {
      in = {random_tensor({3, 3}, r, 0.2, 3.0)};
      return projected([](V& i) { return sqrt(i[0]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "abs")
    return run_named("abs", [](Rng& r, V& in) {
      // keep away from the kink at 0
      auto t = random_tensor({3, 3}, r, 0.1, 1.0);
      for (auto& v : t.value())
        if (r.uniform() < 0.5) v = -v;
      in = {t};
      return projected([](V& i) { return abs(i[0]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "sigmoid")
    return run_named("sigmoid", [](Rng& r, V& in) {
      in = {random_tensor({3, 3}, r, -3.0, 3.0)};
      return projected([](V& i) { return sigmoid(i[0]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "celu")
    return run_named("celu", [](Rng& r, V& in) {
      // stay off the (continuous but curvature-split) origin
      auto t = random_tensor({4, 4}, r, 0.05, 2.0);
      for (auto& v : t.value())
        if (r.uniform() < 0.5) v = -v;
      in = {t};
      return projected([](V& i) { return celu(i[0]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "relu")
    return run_named("relu", [](Rng& r, V& in) {
      auto t = random_tensor({4, 4}, r, 0.05, 2.0);
      for (auto& v : t.value())
        if (r.uniform() < 0.5) v = -v;
      in = {t};
      return projected([](V& i) { return relu(i[0]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "clamp")
    return run_named("clamp", [](Rng& r, V& in) {
      // interior points only; the clamped region is checked separately as a
      // documented analytic-0 vs one-sided-difference mismatch
      in = {random_tensor({3, 3}, r, -0.9, 0.9)};
      return projected([](V& i) { return clamp(i[0], -1.0, 1.0); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "sum")
    return run_named("sum", [](Rng& r, V& in) {
      in = {random_tensor({2, 3, 4}, r)};
      return projected([](V& i) { return sum(i[0], {1}); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "mean")
    return run_named("mean", [](Rng& r, V& in) {
      in = {random_tensor({2, 3, 4}, r)};
      return projected([](V& i) { return mean(i[0], {0, 2}); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "reshape")
    return run_named("reshape", [](Rng& r, V& in) {
      in = {random_tensor({2, 6}, r)};
      return projected([](V& i) { return reshape(i[0], {3, 4}); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "concat")
    return run_named("concat", [](Rng& r, V& in) {
      in = {random_tensor({2, 3}, r), random_tensor({2, 2}, r)};
      return projected([](V& i) { return concat<double>({i[0], i[1]}, 1); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "split")
    return run_named("split", [](Rng& r, V& in) {
      in = {random_tensor({2, 5}, r)};
      return projected([](V& i) {
        auto parts = split(i[0], 1, {2, 3});
        return concat<double>({mul_scalar(parts[0], 2.0), neg(parts[1])}, 1);
      }, r.u64());
    }, seed, step, rtol);
  if (op_name == "slice")
    return run_named("slice", [](Rng& r, V& in) {
      in = {random_tensor({3, 5}, r)};
      return projected([](V& i) { return narrow(i[0], 1, 1, 3); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "broadcast")
    return run_named("broadcast", [](Rng& r, V& in) {
      in = {random_tensor({3, 1}, r)};
      return projected([](V& i) { return broadcast_to(i[0], {2, 3, 4}); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "permute")
    return run_named("permute", [](Rng& r, V& in) {
      in = {random_tensor({2, 3, 4}, r)};
      return projected([](V& i) { return permute(i[0], {2, 0, 1}); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "softmax")
    return run_named("softmax", [](Rng& r, V& in) {
      in = {random_tensor({3, 5}, r, -2.0, 2.0)};
      return projected([](V& i) { return softmax(i[0]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "layer_norm")
    return run_named("layer_norm", [](Rng& r, V& in) {
      in = {random_tensor({3, 6}, r), random_tensor({6}, r, 0.5, 1.5),
            random_tensor({6}, r)};
      return projected([](V& i) { return layer_norm(i[0], i[1], i[2]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "conv2d")
    return run_named("conv2d", [](Rng& r, V& in) {
      in = {random_tensor({1, 2, 5, 5}, r), random_tensor({3, 2, 3, 3}, r),
            random_tensor({3}, r)};
      return projected([](V& i) { return conv2d(i[0], i[1], i[2], 1, 1); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "transpose_conv2d")
    return run_named("transpose_conv2d", [](Rng& r, V& in) {
      in = {random_tensor({1, 3, 3, 3}, r), random_tensor({3, 2, 4, 4}, r),
            random_tensor({2}, r)};
      return projected([](V& i) { return transpose_conv2d(i[0], i[1], i[2], 2, 1); },
                       r.u64());
    }, seed, step, rtol);
  if (op_name == "group_norm")
    return run_named("group_norm", [](Rng& r, V& in) {
      in = {random_tensor({2, 4, 3, 3}, r), random_tensor({4}, r, 0.5, 1.5),
            random_tensor({4}, r)};
      return projected([](V& i) { return group_norm(i[0], 2, i[1], i[2]); }, r.u64());
    }, seed, step, rtol);
  if (op_name == "batch_norm")
    return run_named("batch_norm", [](Rng& r, V& in) {
      in = {random_tensor({3, 2, 3, 3}, r), random_tensor({2}, r, 0.5, 1.5),
            random_tensor({2}, r)};
      return projected([](V& i) {
        std::vector<double> rm(2, 0.0), rv(2, 1.0);
        return batch_norm(i[0], i[1], i[2], &rm, &rv, true);
      }, r.u64());
    }, seed, step, rtol);
  if (op_name == "grid_sample")
    return run_named("grid_sample", [](Rng& r, V& in) {
      // bilinear interpolation has slope breaks at cell boundaries, so the
      // sampled points are placed well inside cells
      const int64_t g = 5;
      auto interior_grid = [&](Shape shape) {
        std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& x : v) {
          const double cell = static_cast<double>(r.randint(0, g - 1));
          const double frac = r.uniform(0.2, 0.8);
          x = (cell + frac) * 2.0 / static_cast<double>(g - 1) - 1.0;
        }
        return Tensor<double>::from_data(std::move(shape), std::move(v));
      };
      in = {random_tensor({2, 2, g, g}, r), interior_grid({2, 3, 4}),
            interior_grid({2, 3, 4})};
      return projected([](V& i) { return grid_sample(i[0], i[1], i[2]); }, r.u64());
    }, seed, step, rtol);

  throw contract_error("gradient_check: unknown op name '" + op_name + "'");
}

inline const std::vector<std::string>& gradient_check_op_names() {
  static const std::vector<std::string> names = {
      "add",        "sub",     "mul",     "div",        "matmul",
      "exp",        "log",     "sqrt",    "abs",        "sigmoid",
      "celu",       "relu",    "clamp",   "sum",        "mean",
      "reshape",    "concat",  "split",   "slice",      "broadcast",
      "permute",    "softmax", "layer_norm", "conv2d",  "transpose_conv2d",
      "group_norm", "batch_norm", "grid_sample"};
  return names;
}

}  // namespace astseg
