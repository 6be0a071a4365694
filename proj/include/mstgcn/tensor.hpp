#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <unordered_set>
#include <vector>

#include "mstgcn/core.hpp"

// When enabled, every op scans its output for NaN/Inf and throws on the
// first hit. On by default in debug builds.
#ifndef MSTGCN_CHECK_FINITE
#ifdef NDEBUG
#define MSTGCN_CHECK_FINITE 0
#else
#define MSTGCN_CHECK_FINITE 1
#endif
#endif

namespace mstgcn {

/// Forward-pass mode: train uses batch statistics and updates running
/// moments in batch norm; eval uses the stored running moments.
enum class Mode { train, eval };

namespace detail {

/// Shared storage behind a Tensor handle. Holds the value buffer, the
/// gradient accumulator, and the recorded edge of the autodiff tape (parents
/// plus a closure that scatters this node's gradient into them).
template <typename Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> values;
  std::vector<Real> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  bool is_leaf() const { return !backprop; }

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), Real(0));
  }
};

}  // namespace detail

inline bool& autograd_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

/// RAII guard that disables tape recording (eval-mode forwards).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(autograd_enabled()) { autograd_enabled() = false; }
  ~NoGradGuard() { autograd_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense numeric array, rank <= 5, row-major. Handles share storage:
/// copying a Tensor aliases the same buffer. Values are immutable between
/// the forward pass that created them and the matching backward; parameters
/// are mutated in place by the optimizer after the tape is consumed.
template <typename Real>
class Tensor {
 public:
  using Node = detail::TensorNode<Real>;

  Tensor() : node_(std::make_shared<Node>()) {}

  explicit Tensor(const Shape& shape, Real fill = Real(0))
      : node_(std::make_shared<Node>()) {
    node_->shape = shape;
    node_->values.assign(static_cast<size_t>(shape.numel()), fill);
  }

  Tensor(const Shape& shape, std::vector<Real> values)
      : node_(std::make_shared<Node>()) {
    if (static_cast<int64_t>(values.size()) != shape.numel()) {
      throw DimensionError("tensor data length " +
                           std::to_string(values.size()) +
                           " does not match shape " + shape.str());
    }
    node_->shape = shape;
    node_->values = std::move(values);
  }

  static Tensor zeros(const Shape& shape) { return Tensor(shape, Real(0)); }
  static Tensor ones(const Shape& shape) { return Tensor(shape, Real(1)); }

  static Tensor uniform(const Shape& shape, Real lo, Real hi,
                        std::mt19937& rng) {
    Tensor t(shape);
    std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                                static_cast<double>(hi));
    for (auto& v : t.node_->values) v = static_cast<Real>(dist(rng));
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return node_->shape.rank(); }
  int64_t numel() const { return node_->shape.numel(); }
  int size(int axis) const { return node_->shape[axis]; }

  const std::vector<Real>& values() const { return node_->values; }

  /// Mutable access to the raw buffer. Callers own the single-writer
  /// contract; mutating a tensor that is still referenced by a live tape
  /// invalidates that tape.
  std::vector<Real>& values_mut() { return node_->values; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Accumulated gradient. Zero-filled on first access.
  const std::vector<Real>& grad() const {
    if (!node_->requires_grad) {
      throw ContractError("grad() called on a tensor without requires_grad");
    }
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
  }

  bool has_grad() const { return !node_->grad.empty(); }

  Real item() const {
    if (numel() != 1) {
      throw ContractError("item() requires a scalar tensor, got shape " +
                          shape().str());
    }
    return node_->values[0];
  }

  template <typename... Ix>
  Real at(Ix... idx) const {
    return node_->values[offset_of(idx...)];
  }

  template <typename... Ix>
  void set(Real v, Ix... idx) {
    node_->values[offset_of(idx...)] = v;
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  template <typename... Ix>
  size_t offset_of(Ix... idx) const {
    constexpr int n = sizeof...(Ix);
    if (n != rank()) {
      throw DimensionError("indexing with " + std::to_string(n) +
                           " indices into shape " + shape().str());
    }
    const std::array<int64_t, sizeof...(Ix)> ix{static_cast<int64_t>(idx)...};
    int64_t off = 0;
    for (int a = 0; a < n; ++a) {
      if (ix[a] < 0 || ix[a] >= node_->shape[a]) {
        throw IndexError("index " + std::to_string(ix[a]) +
                         " out of range for axis " + std::to_string(a) +
                         " of shape " + shape().str());
      }
      off = off * node_->shape[a] + ix[a];
    }
    return static_cast<size_t>(off);
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename Real>
inline void check_finite(const std::vector<Real>& values, const char* op) {
#if MSTGCN_CHECK_FINITE
  for (Real v : values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw ContractError(std::string(op) +
                          " produced a non-finite value from finite inputs");
    }
  }
#else
  (void)values;
  (void)op;
#endif
}

/// Attaches a tape edge to `out` when recording is on and any parent
/// requires grad. The closure receives the output node (whose grad has been
/// populated) and must accumulate into each parent's grad.
template <typename Real, typename Fn>
inline void record(Tensor<Real>& out,
                   std::initializer_list<Tensor<Real>> parents, Fn&& fn) {
  if (!autograd_enabled()) return;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(parents.size());
  for (const auto& p : parents) node.parents.push_back(p.node());
  node.backprop = std::forward<Fn>(fn);
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable leaf that requires grad; intermediate node gradients are
/// recomputed from scratch on each call, so repeated backward calls add up
/// exactly like separate losses would.
template <typename Real>
void backward(const Tensor<Real>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        loss.shape().str());
  }
  using Node = detail::TensorNode<Real>;
  Node* root = loss.node().get();
  if (!root->requires_grad) return;
  if (root->is_leaf()) {
    root->ensure_grad();
    root->grad[0] += Real(1);
    return;
  }

  // Iterative post-order DFS: topological order ends with the loss node.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients restart at zero; leaves keep accumulating.
  for (Node* node : order) {
    if (!node->is_leaf()) {
      node->grad.assign(node->values.size(), Real(0));
    } else {
      node->ensure_grad();
    }
  }
  root->grad.assign(1, Real(1));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backprop) node->backprop(*node);
  }
}

}  // namespace mstgcn
