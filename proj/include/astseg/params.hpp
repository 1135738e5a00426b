#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "astseg/rng.hpp"
#include "astseg/tensor.hpp"

namespace astseg {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

// Flat registry of named model state. `params` are trainable
// (requires_grad = true); `buffers` are serialized but never optimized
// (e.g. batch-norm running statistics). Names are unique across both and
// registration order is stable, which fixes the checkpoint manifest order.
template <typename T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> init) {
    reserve_name(name);
    init.set_requires_grad(true);
    params_.push_back({name, init});
    return init;
  }

  Tensor<T> add_buffer(const std::string& name, Tensor<T> init) {
    reserve_name(name);
    init.set_requires_grad(false);
    buffers_.push_back({name, init});
    return init;
  }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  std::vector<Parameter<T>>& buffers() { return buffers_; }
  const std::vector<Parameter<T>>& buffers() const { return buffers_; }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    for (auto& b : buffers_)
      if (b.name == name) return &b;
    return nullptr;
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  void reserve_name(const std::string& name) {
    check(!name.empty(), "parameter name must not be empty");
    check(taken_.insert({name, true}).second,
          "duplicate parameter name '" + name + "'");
  }

  std::vector<Parameter<T>> params_;
  std::vector<Parameter<T>> buffers_;
  std::unordered_map<std::string, bool> taken_;
};

// fan-in-scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))
template <typename T>
Tensor<T> uniform_init(Shape shape, int64_t fan_in, Rng& rng, double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

}  // namespace astseg
