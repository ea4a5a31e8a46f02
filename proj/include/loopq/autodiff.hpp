#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "loopq/tensor.hpp"

namespace loopq {

namespace detail {
struct NodeImpl;
}

/// Handle to a vertex of a define-by-run reverse-mode graph.
///
/// Handles share ownership of the vertex; an op result keeps its parents
/// alive until the handle is dropped. A graph must stay on one thread.
class Node {
 public:
  Node() = default;

  /// Value that never receives a gradient.
  static Node constant(Tensor value);
  /// Trainable leaf; gradients accumulate across backward() calls until zero_grad().
  static Node leaf(Tensor value);

  const Tensor& value() const;
  /// Gradient of the last backward root w.r.t. this node. Zeros if never touched.
  Tensor grad() const;
  bool has_grad() const;
  bool requires_grad() const;
  bool defined() const noexcept { return impl_ != nullptr; }
  void zero_grad();

  const detail::NodeImpl* id() const noexcept { return impl_.get(); }

  // Internal construction used by op implementations.
  using BackwardFn = std::function<void(const Tensor& out_grad)>;
  static Node make(Tensor value, std::vector<Node> parents, BackwardFn backward);
  void accumulate(const Tensor& g) const;

 private:
  explicit Node(std::shared_ptr<detail::NodeImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::NodeImpl> impl_;

  friend void backward(const Node& root);
};

/// Reverse sweep from a scalar root. Every ancestor is visited exactly once;
/// leaf gradients accumulate across calls, interior gradients are recomputed.
void backward(const Node& root);

// Linear algebra.
Node matmul(const Node& a, const Node& b);
/// x * w^T, the usual dense-layer product with w stored as (out, in).
Node linear(const Node& x, const Node& w);
Node transpose(const Node& a);
Node inverse(const Node& a);
/// Kronecker product a (x) b.
Node kron(const Node& a, const Node& b);

// Elementwise. The right operand may broadcast: equal shape, 1 x c (row),
// r x 1 (column) or 1 x 1.
Node add(const Node& a, const Node& b);
Node sub(const Node& a, const Node& b);
Node mul(const Node& a, const Node& b);
Node div(const Node& a, const Node& b);
Node scale(const Node& a, double s);
Node add_scalar(const Node& a, double s);
Node sqrt(const Node& a);
Node square(const Node& a);
Node silu(const Node& a);
Node clip(const Node& a, double lo, double hi);
/// Round half to even with straight-through gradient.
Node round_ste(const Node& a);
/// clip(round(a), lo, hi); gradient is 1 where lo <= a <= hi and 0 outside.
Node round_ste(const Node& a, double lo, double hi);
/// Forward value replaced by `forward_value`, gradient passed through unchanged.
Node straight_through(const Node& a, Tensor forward_value);

// Reductions to 1 x 1.
Node sum(const Node& a);
Node mean(const Node& a);
/// mean((a - b)^2) over all elements.
Node mean_squared_error(const Node& a, const Node& b);

// Fused layers.
/// Row-wise x / sqrt(mean(x^2) + eps), no gain.
Node rms_norm(const Node& x, double eps);
/// Causal multi-head self-attention over rows grouped into sequences of
/// `seq_len`; q, k, v are (batch*seq_len) x d.
Node causal_attention(const Node& q, const Node& k, const Node& v, std::size_t seq_len, std::size_t heads);
/// Repeats each entry of a 1 x g row `group_size` times -> 1 x (g*group_size).
Node expand_groups(const Node& c, std::size_t group_size);
/// Row gather: out[i] = table[ids[i]].
Node embedding(const Node& table, std::span<const int> ids);
/// Mean token cross-entropy of logits against integer targets; negative
/// targets are ignored.
Node cross_entropy(const Node& logits, std::span<const int> targets);
/// Mean over rows of KL(softmax(teacher/T) || softmax(student/T)) restricted to
/// each row's top-k teacher entries (both sides renormalized over that set).
Node kl_divergence(const Tensor& teacher_logits, const Node& student_logits, double temperature,
                   std::size_t top_k);

}  // namespace loopq
