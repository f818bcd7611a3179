#pragma once

#include <Eigen/Core>

#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace iterthink {

using Shape = std::vector<Eigen::Index>;

inline Eigen::Index numel_of(const Shape& s) {
  Eigen::Index n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Thread-local gradient-recording switch. Ops record history only while this
// is on and at least one operand requires grad.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense tensor handle with reverse-mode autodiff. Values are stored flat in
// row-major order; shapes are small (at most [B,C,L] here). Handles share the
// underlying node, so copies are cheap and graph edges stay alive as long as
// some handle (or a downstream node) refers to them.
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  struct Node {
    Shape shape;
    Array values;
    Array grad;  // sized on first accumulation
    bool requires_grad = false;
    bool released = false;  // backward already consumed this node
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Array&)> backward;  // pushes upstream into parents
  };

  Tensor() = default;

  Tensor(Shape shape, Array values, bool requires_grad = false) {
    if (values.size() != numel_of(shape))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Array a = Array::Zero(numel_of(shape));
    return Tensor(std::move(shape), std::move(a), requires_grad);
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    Array a = Array::Constant(numel_of(shape), value);
    return Tensor(std::move(shape), std::move(a), requires_grad);
  }

  static Tensor scalar(S value, bool requires_grad = false) {
    Array a(1);
    a[0] = value;
    return Tensor(Shape{}, std::move(a), requires_grad);
  }

  static Tensor from(Shape shape, std::initializer_list<S> vals, bool requires_grad = false) {
    Array a(static_cast<Eigen::Index>(vals.size()));
    Eigen::Index i = 0;
    for (S v : vals) a[i++] = v;
    return Tensor(std::move(shape), std::move(a), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Eigen::Index dim(std::size_t i) const { return node_->shape[i]; }
  Eigen::Index numel() const { return node_->values.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  Array& values() { return node_->values; }
  const Array& values() const { return node_->values; }

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  const Array& grad() const {
    if (!has_grad()) throw GraphError("tensor: gradient not populated");
    return node_->grad;
  }
  void zero_grad() {
    if (node_->grad.size() != node_->values.size())
      node_->grad = Array::Zero(node_->values.size());
    else
      node_->grad.setZero();
  }
  void clear_grad() { node_->grad.resize(0); }

  S item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
    return node_->values[0];
  }

  // Same values, no history. Values are copied so later in-place edits on
  // either side stay independent.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->values = node_->values;
    t.node_->requires_grad = false;
    return t;
  }

  std::shared_ptr<Node> node() const { return node_; }

  static Tensor wrap(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename S>
void accumulate(typename Tensor<S>::Node& n, const typename Tensor<S>::Array& g) {
  if (!n.requires_grad) return;
  if (n.grad.size() != n.values.size()) n.grad = Tensor<S>::Array::Zero(n.values.size());
  n.grad += g;
}

}  // namespace detail

// Records a new op node. `backward` receives the upstream gradient of the new
// node and is responsible for accumulating into the parents it captured.
template <typename S, typename F>
Tensor<S> make_op(Shape shape, typename Tensor<S>::Array values,
                  std::vector<Tensor<S>> parents, F&& backward) {
  Tensor<S> out(std::move(shape), std::move(values), false);
  if (!grad_mode()) return out;
  bool any = false;
  for (const auto& p : parents)
    if (p.requires_grad()) any = true;
  if (!any) return out;
  auto n = out.node();
  n->requires_grad = true;
  n->parents.reserve(parents.size());
  for (auto& p : parents) n->parents.push_back(p.node());
  n->backward = std::forward<F>(backward);
  return out;
}

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once in reverse topological order, then drops graph edges so intermediate
// buffers can be reclaimed. Leaf gradients stay in place.
template <typename S>
void backward(Tensor<S> loss) {
  using Node = typename Tensor<S>::Node;
  if (loss.numel() != 1) throw GraphError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;  // nothing reachable requires grad
  if (loss.node()->released) throw GraphError("backward: graph already consumed");

  // Iterative post-order DFS; nodes are marked at push time so diamonds are
  // enqueued once. Parents are strictly older than consumers, so every marked
  // parent of a popped node has already been appended.
  std::vector<std::shared_ptr<Node>> order;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  loss.node()->released = true;
  stack.emplace_back(loss.node(), 0);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      auto child = n->parents[next++];
      if (child && child->requires_grad && !child->released) {
        child->released = true;
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad = Tensor<S>::Array::Constant(1, S(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node& n = **it;
    if (n.backward && n.grad.size() == n.values.size()) n.backward(n.grad);
    if (n.backward) {
      n.grad.resize(0);  // intermediate grads are not needed once propagated
      n.backward = nullptr;
      n.parents.clear();
    }
  }
}

// Value-level helpers used throughout the analysis code.
template <typename S>
S l2_norm(const Tensor<S>& t) {
  return std::sqrt(static_cast<S>(t.values().square().sum()));
}

template <typename S>
S l2_distance(const Tensor<S>& a, const Tensor<S>& b) {
  return std::sqrt(static_cast<S>((a.values() - b.values()).square().sum()));
}

template <typename S>
bool all_finite(const Tensor<S>& t) {
  return t.values().isFinite().all();
}

}  // namespace iterthink
