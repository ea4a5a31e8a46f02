#pragma once

// Helpers shared by the unit and acceptance tests.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "loopq/autodiff.hpp"
#include "loopq/linalg.hpp"
#include "loopq/model.hpp"
#include "loopq/quant.hpp"
#include "loopq/tensor.hpp"

namespace loopq::testing {

inline Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
  return rng.normal_matrix(rows, cols, stddev);
}

/// |a - b| / max(|a|, |b|) over whole tensors; 0 when both vanish.
inline double rel_err(const Tensor& a, const Tensor& b) {
  const double den = std::max(frobenius_norm(a), frobenius_norm(b));
  return den > 0.0 ? frobenius_norm(sub(a, b)) / den : 0.0;
}

using ScalarFn = std::function<Node(const std::vector<Node>&)>;

/// Analytic gradients of f at x for the first `n_grad` inputs; the rest are constants.
inline std::vector<Tensor> analytic_grad(const ScalarFn& f, const std::vector<Tensor>& x, std::size_t n_grad) {
  std::vector<Node> nodes;
  for (std::size_t i = 0; i < x.size(); ++i) nodes.push_back(i < n_grad ? Node::leaf(x[i]) : Node::constant(x[i]));
  backward(f(nodes));
  std::vector<Tensor> g;
  for (std::size_t i = 0; i < n_grad; ++i) g.push_back(nodes[i].grad());
  return g;
}

inline double eval_scalar(const ScalarFn& f, const std::vector<Tensor>& x) {
  std::vector<Node> nodes;
  for (const Tensor& t : x) nodes.push_back(Node::constant(t));
  return f(nodes).value().item();
}

/// Central differences, one coordinate at a time.
inline std::vector<Tensor> numeric_grad(const ScalarFn& f, std::vector<Tensor> x, std::size_t n_grad,
                                        double h = 1e-5) {
  std::vector<Tensor> g;
  for (std::size_t i = 0; i < n_grad; ++i) {
    Tensor gi(x[i].shape());
    for (std::size_t j = 0; j < x[i].size(); ++j) {
      const double keep = x[i][j];
      x[i][j] = keep + h;
      const double up = eval_scalar(f, x);
      x[i][j] = keep - h;
      const double down = eval_scalar(f, x);
      x[i][j] = keep;
      gi[j] = (up - down) / (2 * h);
    }
    g.push_back(std::move(gi));
  }
  return g;
}

/// Largest per-input relative gradient error.
inline double grad_check(const ScalarFn& f, const std::vector<Tensor>& x, std::size_t n_grad) {
  const auto a = analytic_grad(f, x, n_grad);
  const auto n = numeric_grad(f, x, n_grad);
  double worst = 0.0;
  for (std::size_t i = 0; i < n_grad; ++i) worst = std::max(worst, rel_err(a[i], n[i]));
  return worst;
}

/// Differentiable op under test. `inputs` draws one random case; the first
/// `n_grad` inputs are differentiated. The op output is reduced to a scalar by
/// a fixed random weighting so every output entry contributes.
struct OpCase {
  std::string name;
  std::size_t n_grad;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  std::function<Node(const std::vector<Node>&)> op;
};

/// Uniform in +-[lo, hi] with a random sign.
inline Tensor away_from_zero(Rng& rng, std::size_t r, std::size_t c, double lo, double hi) {
  Tensor t({r, c});
  for (double& v : t.data()) v = (rng.uniform() < 0.5 ? -1 : 1) * (lo + (hi - lo) * rng.uniform());
  return t;
}

/// Shape of the right operand for a broadcasting case: same, row, column or scalar.
inline std::pair<std::size_t, std::size_t> broadcast_shape(std::size_t k, std::size_t r, std::size_t c) {
  switch (k % 4) {
    case 0: return {r, c};
    case 1: return {1, c};
    case 2: return {r, 1};
    default: return {1, 1};
  }
}

inline std::vector<OpCase> differentiable_ops() {
  using V = std::vector<Node>;
  std::vector<OpCase> ops;
  auto binary = [&](std::string name, std::function<Node(const Node&, const Node&)> f, bool positive_rhs) {
    ops.push_back({name, 2,
                   [positive_rhs](Rng& rng) {
                     const auto [r, c] = broadcast_shape(rng.below(4), 3, 4);
                     Tensor b = positive_rhs ? away_from_zero(rng, r, c, 0.5, 1.5) : random_tensor(rng, r, c);
                     return std::vector<Tensor>{random_tensor(rng, 3, 4), b};
                   },
                   [f](const V& x) { return f(x[0], x[1]); }});
  };
  ops.push_back({"matmul", 2, [](Rng& r) { return std::vector{random_tensor(r, 3, 4), random_tensor(r, 4, 2)}; },
                 [](const V& x) { return matmul(x[0], x[1]); }});
  ops.push_back({"linear", 2, [](Rng& r) { return std::vector{random_tensor(r, 3, 4), random_tensor(r, 5, 4)}; },
                 [](const V& x) { return linear(x[0], x[1]); }});
  ops.push_back({"transpose", 1, [](Rng& r) { return std::vector{random_tensor(r, 3, 4)}; },
                 [](const V& x) { return transpose(x[0]); }});
  ops.push_back({"inverse", 1,
                 [](Rng& r) { return std::vector{add(scaled(Tensor::identity(4), 2.0), random_tensor(r, 4, 4, 0.3))}; },
                 [](const V& x) { return inverse(x[0]); }});
  ops.push_back({"kron", 2, [](Rng& r) { return std::vector{random_tensor(r, 2, 3), random_tensor(r, 2, 2)}; },
                 [](const V& x) { return kron(x[0], x[1]); }});
  binary("add", [](const Node& a, const Node& b) { return add(a, b); }, false);
  binary("sub", [](const Node& a, const Node& b) { return sub(a, b); }, false);
  binary("mul", [](const Node& a, const Node& b) { return mul(a, b); }, false);
  binary("div", [](const Node& a, const Node& b) { return div(a, b); }, true);
  ops.push_back({"scale", 1, [](Rng& r) { return std::vector{random_tensor(r, 3, 4)}; },
                 [](const V& x) { return scale(x[0], -1.7); }});
  ops.push_back({"add_scalar", 1, [](Rng& r) { return std::vector{random_tensor(r, 3, 4)}; },
                 [](const V& x) { return add_scalar(x[0], 0.3); }});
  ops.push_back({"sqrt", 1,
                 [](Rng& r) {
                   Tensor t = random_tensor(r, 3, 4);
                   for (double& v : t.data()) v = 0.5 + std::abs(v);
                   return std::vector{t};
                 },
                 [](const V& x) { return sqrt(x[0]); }});
  ops.push_back({"square", 1, [](Rng& r) { return std::vector{random_tensor(r, 3, 4)}; },
                 [](const V& x) { return square(x[0]); }});
  ops.push_back({"silu", 1, [](Rng& r) { return std::vector{random_tensor(r, 3, 4, 2.0)}; },
                 [](const V& x) { return silu(x[0]); }});
  ops.push_back({"clip", 1,
                 [](Rng& r) {
                   // Keep every entry at least 0.05 away from the clip points.
                   Tensor t({3, 4});
                   for (double& v : t.data()) {
                     do v = 4 * r.uniform() - 2;
                     while (std::abs(std::abs(v) - 1.0) < 0.05);
                   }
                   return std::vector{t};
                 },
                 [](const V& x) { return clip(x[0], -1.0, 1.0); }});
  ops.push_back({"sum", 1, [](Rng& r) { return std::vector{random_tensor(r, 3, 4)}; },
                 [](const V& x) { return sum(x[0]); }});
  ops.push_back({"mean", 1, [](Rng& r) { return std::vector{random_tensor(r, 3, 4)}; },
                 [](const V& x) { return mean(x[0]); }});
  ops.push_back({"mean_squared_error", 2,
                 [](Rng& r) { return std::vector{random_tensor(r, 3, 4), random_tensor(r, 3, 4)}; },
                 [](const V& x) { return mean_squared_error(x[0], x[1]); }});
  ops.push_back({"rms_norm", 1, [](Rng& r) { return std::vector{random_tensor(r, 3, 6)}; },
                 [](const V& x) { return rms_norm(x[0], 1e-6); }});
  ops.push_back({"causal_attention", 3,
                 [](Rng& r) {
                   return std::vector{random_tensor(r, 6, 4), random_tensor(r, 6, 4), random_tensor(r, 6, 4)};
                 },
                 [](const V& x) { return causal_attention(x[0], x[1], x[2], 3, 2); }});
  ops.push_back({"expand_groups", 1, [](Rng& r) { return std::vector{random_tensor(r, 1, 3)}; },
                 [](const V& x) { return expand_groups(x[0], 2); }});
  ops.push_back({"embedding", 1, [](Rng& r) { return std::vector{random_tensor(r, 5, 3)}; },
                 [](const V& x) {
                   static const std::vector<int> ids{4, 0, 2, 2, 1};
                   return embedding(x[0], ids);
                 }});
  ops.push_back({"cross_entropy", 1, [](Rng& r) { return std::vector{random_tensor(r, 4, 5, 2.0)}; },
                 [](const V& x) {
                   static const std::vector<int> targets{1, -1, 4, 0};
                   return cross_entropy(x[0], targets);
                 }});
  ops.push_back({"kl_divergence", 1,
                 [](Rng& r) { return std::vector{random_tensor(r, 3, 6, 2.0), random_tensor(r, 3, 6, 2.0)}; },
                 [](const V& x) { return kl_divergence(x[1].value(), x[0], 1.5, 4); }});
  return ops;
}

/// Scalar reduction sum(op(x) .* R) with R fixed by `seed`.
inline ScalarFn weighted(const OpCase& c, const std::vector<Tensor>& x, std::uint64_t seed) {
  std::vector<Node> probe;
  for (const Tensor& t : x) probe.push_back(Node::constant(t));
  const Tensor out = c.op(probe).value();
  Rng rng(seed);
  const Tensor r = rng.normal_matrix(out.rows(), out.cols(), 1.0);
  return [c, r](const std::vector<Node>& in) { return sum(mul(c.op(in), Node::constant(r))); };
}

/// Weight reused `loops` times: h <- h + silu(h W^T), loss = sum(h_T .* R).
inline ScalarFn looped_weight_fn(std::size_t loops, const Tensor& r) {
  return [loops, r](const std::vector<Node>& x) {
    Node h = x[0];
    for (std::size_t t = 0; t < loops; ++t) h = add(h, silu(linear(h, x[1])));
    return sum(mul(h, Node::constant(r)));
  };
}

/// Well-conditioned random affine transform I + noise.
inline TransformParam random_affine(std::size_t d, Rng& rng, bool kron_form) {
  TransformParam p = TransformParam::affine(d, kron_form);
  for (Tensor* f : {&p.a, &p.b}) {
    if (f->empty()) continue;
    *f = add(*f, rng.normal_matrix(f->rows(), f->cols(), 0.2));
  }
  return p;
}

inline ModelConfig small_block_config(std::size_t d = 16, std::size_t layers = 2, std::size_t loops = 3) {
  ModelConfig c;
  c.vocab = 32;
  c.d = d;
  c.heads = 2;
  c.ffn = 2 * d;
  c.layers = layers;
  c.loops = loops;
  c.max_seq = 16;
  return c;
}

inline TokenBatch random_batch(std::size_t vocab, std::size_t batch, std::size_t seq, std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch b{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(static_cast<int>(rng.below(vocab)));
  return b;
}

}  // namespace loopq::testing
