#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "invcoss/errors.hpp"

namespace invcoss {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::vector<size_t> row_major_strides(const Shape& s) {
  std::vector<size_t> st(s.size(), 1);
  for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables tape recording in scope; forwards become plain evaluation.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents
  const char* op = "leaf";
  bool requires_grad = false;
  bool backward_done = false;

  size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from(std::move(shape), std::vector<T>(shape_numel(shape), T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    return from(std::move(shape), std::vector<T>(shape_numel(shape), v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  size_t ndim() const { return n_->shape.size(); }
  size_t dim(size_t i) const { return n_->shape.at(i); }
  size_t numel() const { return n_->value.size(); }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  std::vector<T>& values() { return n_->value; }
  const std::vector<T>& values() const { return n_->value; }
  T* data() { return n_->value.data(); }
  const T* data() const { return n_->value.data(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
    return n_->value[0];
  }

  // Gradient buffer; zeros when no backward pass has reached this tensor.
  const std::vector<T>& grad() const {
    n_->ensure_grad();
    return n_->grad;
  }

  void zero_grad() { n_->grad.assign(n_->value.size(), T(0)); }

  // Value copy detached from the tape.
  Tensor detach() const { return from(shape(), values(), false); }

  std::shared_ptr<Node<T>>& node() { return n_; }
  const std::shared_ptr<Node<T>>& node() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <typename T>
Tensor<T> op_result(const char* op, Shape shape, std::vector<T> values,
                    std::vector<std::shared_ptr<Node<T>>> parents,
                    std::function<void(Node<T>&)> backprop) {
  auto t = Tensor<T>::from(std::move(shape), std::move(values), false);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    t.node()->requires_grad = true;
    t.node()->parents = std::move(parents);
    t.node()->backprop = std::move(backprop);
    t.node()->op = op;
  }
  return t;
}

template <typename T>
void topo_collect(Node<T>* root, std::vector<Node<T>*>& order) {
  // Iterative post-order over the requires_grad subgraph.
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Reverse-mode sweep from a scalar root. Gradients accumulate into every
// reachable node that requires grad; leaves keep theirs until zero_grad.
template <typename T>
void backward(const Tensor<T>& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
  }
  auto* rn = root.node().get();
  if (rn->backward_done) {
    throw Error("backward: already ran from this root; reset_backward first");
  }
  if (!rn->requires_grad) {
    rn->backward_done = true;
    return;  // constant root: nothing reachable
  }
  std::vector<Node<T>*> order;
  detail::topo_collect(rn, order);
  rn->ensure_grad();
  rn->grad[0] = T(1);
  for (size_t i = order.size(); i-- > 0;) {
    Node<T>* n = order[i];
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
  rn->backward_done = true;
}

// Clears the done flag and zeroes gradients across the reachable graph.
template <typename T>
void reset_backward(const Tensor<T>& root) {
  std::vector<Node<T>*> order;
  if (root.node()->requires_grad) {
    detail::topo_collect(root.node().get(), order);
  } else {
    order.push_back(root.node().get());
  }
  for (auto* n : order) {
    n->backward_done = false;
    if (!n->grad.empty()) n->grad.assign(n->value.size(), T(0));
  }
}

}  // namespace invcoss
