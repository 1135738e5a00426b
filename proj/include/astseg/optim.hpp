#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "astseg/params.hpp"

namespace astseg {

struct AdamConfig {
  double beta1 = 0.90;
  double beta2 = 0.98;
  double eps = 1e-9;
};

// Quadratic warmup, then a flat rate, then a x0.1 drop once step reaches
// decay_frac of the total schedule.
inline double lr_schedule(int64_t step, double base_lr, int64_t warmup_steps,
                          int64_t total_steps, double decay_frac = 0.9) {
  const double f =
      warmup_steps > 0
          ? std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps))
          : 1.0;
  double lr = base_lr * f * f;
  if (static_cast<double>(step) >= decay_frac * static_cast<double>(total_steps))
    lr *= 0.1;
  return lr;
}

// Scales all gradients so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_grad_global_norm(std::vector<Parameter<T>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params)
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      for (T& g : p.tensor.grad()) g *= scale;
  }
  return norm;
}

// Bias-corrected Adam over a fixed parameter list. Parameters whose name
// starts with a frozen prefix are left bit-identical by step().
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(static_cast<size_t>(params_[i].tensor.numel()), T(0));
      v_[i].assign(static_cast<size_t>(params_[i].tensor.numel()), T(0));
    }
  }

  void set_frozen_prefixes(std::vector<std::string> prefixes) {
    frozen_ = std::move(prefixes);
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::vector<Parameter<T>>& params() { return params_; }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (size_t i = 0; i < params_.size(); ++i) {
      if (is_frozen(params_[i].name)) continue;
      auto& p = params_[i].tensor;
      check(p.grad().size() == p.value().size(), "adam: grad/value size mismatch");
      auto& val = p.value();
      const auto& g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < val.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        const double mhat = static_cast<double>(m[j]) / bc1;
        const double vhat = static_cast<double>(v[j]) / bc2;
        val[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  int64_t timestep() const { return t_; }

 private:
  bool is_frozen(const std::string& name) const {
    for (const auto& pre : frozen_)
      if (name.rfind(pre, 0) == 0) return true;
    return false;
  }

  std::vector<Parameter<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::vector<std::string> frozen_;
  int64_t t_ = 0;
};

}  // namespace astseg
