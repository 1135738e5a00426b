#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "astseg/common.hpp"

namespace astseg {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Autograd is recorded only while this is true; see NoGradGuard.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline int64_t next_node_id() {
  static std::atomic<int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first touched; then same length as value
  bool requires_grad = false;
  int64_t id = next_node_id();
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Shared handle to one node of a computation graph. Copies alias the same
// storage; ops never mutate a node's value after construction.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape) {
    return filled(std::move(shape), T(0));
  }

  static Tensor filled(Shape shape, T v) {
    auto n = std::make_shared<TensorNode<T>>();
    n->value.assign(shape_numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    check(shape_numel(shape) == static_cast<int64_t>(data.size()),
          "tensor data length " + std::to_string(data.size()) +
              " does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from_data({}, {v}); }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t size(int i) const {
    if (i < 0) i += ndim();
    return node_->shape[static_cast<size_t>(i)];
  }

  std::vector<T>& value() { return node_->value; }
  const std::vector<T>& value() const { return node_->value; }

  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    node_->requires_grad = rg;
    return *this;
  }

  T item() const {
    check(numel() == 1, "item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  int64_t node_id() const { return node_->id; }

  // Same values, no graph history.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Builds the result node of an op. Graph edges and the backward closure are
// recorded only when some parent requires grad and grad mode is on, so
// NoGradGuard evaluation produces plain leaf tensors.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value,
                  const std::vector<Tensor<T>>& parents,
                  std::function<void(TensorNode<T>&)> backward_fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool rg = false;
  if (grad_mode()) {
    for (const auto& p : parents) rg = rg || (p.defined() && p.node()->requires_grad);
  }
  node->requires_grad = rg;
  if (rg) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents)
      if (p.defined()) node->parents.push_back(p.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

// Reverse-mode sweep from a scalar root. Gradients accumulate additively
// into every requires_grad ancestor; call zero_grad between steps. Unless
// retain_graph is set, interior edges are released afterwards so a step's
// graph does not outlive its backward pass.
template <typename T>
void backward(const Tensor<T>& root, bool retain_graph = false) {
  check(root.defined() && root.numel() == 1,
        "backward requires a scalar root tensor");

  std::vector<TensorNode<T>*> topo;
  std::unordered_set<TensorNode<T>*> seen;
  // iterative post-order DFS, children in parent-list order
  std::vector<std::pair<TensorNode<T>*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad();
  root.node()->grad[0] += T(1);

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->requires_grad && node->backward_fn) node->backward_fn(*node);
  }

  if (!retain_graph) {
    for (TensorNode<T>* node : topo) {
      node->backward_fn = nullptr;
      node->parents.clear();
    }
  }
}

namespace detail {

// Walks every index of out_shape in row-major order, calling
// fn(out_linear, mapped_linear) where mapped_linear advances by
// `strides` (use stride 0 to broadcast a dimension).
template <typename F>
void for_each_mapped(const Shape& out_shape, const std::vector<int64_t>& strides,
                     int64_t offset, F&& fn) {
  const size_t nd = out_shape.size();
  const int64_t total = shape_numel(out_shape);
  if (total == 0) return;
  if (nd == 0) {
    fn(0, offset);
    return;
  }
  std::vector<int64_t> idx(nd, 0);
  int64_t mapped = offset;
  for (int64_t lin = 0;;) {
    fn(lin, mapped);
    if (++lin == total) break;
    // odometer increment
    for (size_t d = nd; d-- > 0;) {
      idx[d]++;
      mapped += strides[d];
      if (idx[d] < out_shape[d]) break;
      mapped -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

}  // namespace astseg
