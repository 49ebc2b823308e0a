#pragma once

// Dense row-major tensor with a reverse-mode autodiff tape.
//
// A Tensor is a cheap handle onto a shared node; copying a Tensor aliases the
// same buffer (the graph needs this). Use clone() for an independent copy.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gct/error.hpp"

namespace gct {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : n_(std::make_shared<NodeT>()) {
    check_dims(shape);
    n_->data.assign(shape_numel(shape), fill);
    n_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : n_(std::make_shared<NodeT>()) {
    check_dims(shape);
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    n_->shape = std::move(shape);
    n_->data = std::move(data);
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  // Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> data) {
    Tensor t(std::move(shape), std::move(data));
    t.n_->requires_grad = true;
    return t;
  }

  bool defined() const noexcept { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t ndim() const { return n_->shape.size(); }
  std::size_t size() const { return n_->data.size(); }
  std::size_t rows() const { return n_->shape.size() == 1 ? 1 : n_->shape.front(); }
  std::size_t cols() const { return n_->shape.back(); }

  std::span<T> data() { return n_->data; }
  std::span<const T> data() const { return n_->data; }
  T& operator[](std::size_t i) { return n_->data[i]; }
  const T& operator[](std::size_t i) const { return n_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return n_->data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return n_->data[r * cols() + c]; }

  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return n_->data[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool v) { n_->requires_grad = v; }
  bool has_grad() const { return !n_->grad.empty(); }
  std::span<T> grad() { return n_->grad; }
  std::span<const T> grad() const { return n_->grad; }
  std::vector<T>& ensure_grad() { return n_->ensure_grad(); }
  void clear_grad() { n_->grad.clear(); }

  // Independent leaf copy of the values (no graph, same requires_grad).
  Tensor clone() const {
    Tensor t(shape(), n_->data);
    t.n_->requires_grad = n_->requires_grad;
    return t;
  }

  // Value copy cut from the graph.
  Tensor detach() const { return Tensor(shape(), n_->data); }

  // Reverse sweep from a scalar. Every requires_grad node reachable from here
  // ends up with a populated grad buffer.
  void backward() {
    if (size() != 1) throw DimensionError("backward() needs a scalar, got " + shape_str(shape()));
    std::vector<NodeT*> order;
    topo_order(order);
    n_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      NodeT* node = *it;
      if (node->backward_fn) {
        node->ensure_grad();
        node->backward_fn(*node);
      }
    }
  }

  NodeT* node() const { return n_.get(); }
  const std::shared_ptr<NodeT>& node_ptr() const { return n_; }

  // Builds a graph node from an op. The backward closure receives the output
  // node; parents are reachable through node.parents in the given order.
  static Tensor from_op(Shape shape, std::vector<T> data, std::vector<Tensor> inputs,
                        std::function<void(NodeT&)> backward_fn) {
    Tensor out(std::move(shape), std::move(data));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.n_->requires_grad;
    if (!any) return out;
    out.n_->requires_grad = true;
    out.n_->parents.reserve(inputs.size());
    for (auto& in : inputs) out.n_->parents.push_back(in.n_);
    out.n_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  static void check_dims(const Shape& s) {
    if (s.empty()) throw DimensionError("tensor: empty shape");
    for (auto d : s) {
      if (d == 0) throw DimensionError("tensor: zero-sized dim in " + shape_str(s));
    }
  }

  void topo_order(std::vector<NodeT*>& order) const {
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{n_.get(), 0}};
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        NodeT* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<NodeT> n_;
};

}  // namespace gct
