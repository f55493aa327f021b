#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "volflow/common.hpp"

namespace volflow {

// Dense 4-D shape: (depth, height, width, channels). Scalars are (1,1,1,1),
// per-channel vectors are (1,1,1,C).
struct Shape {
  int64_t d = 1, h = 1, w = 1, c = 1;

  Shape() = default;
  Shape(int64_t d_, int64_t h_, int64_t w_, int64_t c_) : d(d_), h(h_), w(w_), c(c_) {}

  int64_t count() const { return d * h * w * c; }
  int64_t spatial() const { return d * h * w; }
  bool operator==(const Shape& o) const = default;

  int64_t index(int64_t id, int64_t ih, int64_t iw, int64_t ic) const {
    return ((id * h + ih) * w + iw) * c + ic;
  }

  std::string str() const { return cat("(", d, ",", h, ",", w, ",", c, ")"); }

  void validate(const char* what) const {
    if (d < 1 || h < 1 || w < 1 || c < 1)
      throw ContractError(cat(what, ": all dims must be >= 1, got ", str()));
  }
};

inline Shape scalar_shape() { return Shape(1, 1, 1, 1); }

// One node of the implicit op graph. Nodes record their inputs and a backward
// closure; the graph is acyclic by construction (ops only consume existing
// nodes) and backward() visits each node exactly once in reverse topological
// order.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // lazily allocated on first accumulation
  bool requires_grad = false;
  bool leaf = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void()> backprop;  // set iff requires_grad and not a leaf

  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (const T& x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw NonFiniteError(cat("non-finite value produced by op '", op, "'"));
  }
}

// Value-semantics handle to a graph node. Tensors are immutable once created;
// the one sanctioned mutation is an optimizer updating a leaf parameter
// between graph constructions (values_mut).
template <class T>
class Var {
 public:
  Var() = default;

  static Var leaf(const Shape& s, std::vector<T> v, bool requires_grad = false) {
    s.validate("tensor");
    if (static_cast<int64_t>(v.size()) != s.count())
      throw ContractError(
          cat("tensor: element count ", v.size(), " does not match shape ", s.str()));
    check_finite(v, "leaf");
    auto n = std::make_shared<Node<T>>();
    n->shape = s;
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->leaf = true;
    Var out;
    out.node_ = std::move(n);
    return out;
  }

  static Var full(const Shape& s, T fill, bool requires_grad = false) {
    return leaf(s, std::vector<T>(s.count(), fill), requires_grad);
  }

  static Var scalar(T v) { return leaf(scalar_shape(), {v}); }

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t count() const { return node_->shape.count(); }
  const std::vector<T>& value() const { return node_->value; }

  // Leaf-only mutation hook for optimizers; never call on derived nodes.
  std::vector<T>& values_mut() {
    if (!node_->leaf) throw ContractError("values_mut: only leaf tensors may be mutated");
    return node_->value;
  }

  const std::vector<T>& grad() const {
    if (node_->grad.empty())
      throw ContractError(cat("grad: no gradient accumulated for node '", node_->op, "'"));
    return node_->grad;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.clear(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  static Var from_node(std::shared_ptr<Node<T>> n) {
    Var out;
    out.node_ = std::move(n);
    return out;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
void topo_order(Node<T>* root, std::vector<Node<T>*>& order);

}  // namespace detail

// Reverse-mode sweep from a scalar output. Populates .grad on every node that
// requires a gradient; leaves keep theirs until zero_grad.
template <class T>
void backward(const Var<T>& out);

// Number of nodes reachable from `out` (diagnostics / graph-contract tests).
template <class T>
size_t graph_node_count(const Var<T>& out);

}  // namespace volflow
