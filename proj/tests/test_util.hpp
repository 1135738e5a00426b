#pragma once

#include <cmath>
#include <vector>

#include "astseg/rng.hpp"
#include "astseg/tensor.hpp"

namespace testutil {

template <typename T>
astseg::Tensor<T> random_tensor(astseg::Shape shape, astseg::Rng& rng,
                                double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(static_cast<size_t>(astseg::shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return astseg::Tensor<T>::from_data(std::move(shape), std::move(v));
}

inline double max_abs_diff(const std::vector<double>& a,
                           const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
