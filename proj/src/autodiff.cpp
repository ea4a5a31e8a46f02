#include "loopq/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "loopq/errors.hpp"

namespace loopq {

namespace detail {

struct NodeImpl {
  Tensor value;
  Tensor grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<Node> parents;
  Node::BackwardFn backward;
};

}  // namespace detail

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
MutMap view(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
}

// Right-operand broadcasting modes.
enum class Bcast { same, row, col, scalar };

Bcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return Bcast::same;
  if (b.rank() == 2 && b.rows() == 1 && b.cols() == 1) return Bcast::scalar;
  if (a.rank() == 2 && b.rank() == 2) {
    if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::row;
    if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::col;
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) + " onto " +
                       shape_string(a.shape()));
}

// Index into b for flat element i of a.
inline std::size_t bidx(Bcast mode, std::size_t i, std::size_t cols) {
  switch (mode) {
    case Bcast::same: return i;
    case Bcast::row: return i % cols;
    case Bcast::col: return i / cols;
    case Bcast::scalar: return 0;
  }
  return 0;
}

Tensor reduce_to(const Tensor& g, Bcast mode, const Tensor::Shape& target) {
  if (mode == Bcast::same) return g;
  Tensor out(target);
  const std::size_t cols = g.rank() == 2 ? g.cols() : 1;
  for (std::size_t i = 0; i < g.size(); ++i) out[bidx(mode, i, cols)] += g[i];
  return out;
}

std::size_t cols_of(const Tensor& t) { return t.rank() == 2 ? t.cols() : 1; }

template <typename F>
Tensor map_values(const Tensor& a, F f) {
  Tensor out = a;
  for (double& v : out.data()) v = f(v);
  return out;
}

}  // namespace

Node Node::constant(Tensor value) {
  auto impl = std::make_shared<detail::NodeImpl>();
  impl->value = std::move(value);
  return Node(std::move(impl));
}

Node Node::leaf(Tensor value) {
  auto impl = std::make_shared<detail::NodeImpl>();
  impl->value = std::move(value);
  impl->requires_grad = true;
  return Node(std::move(impl));
}

Node Node::make(Tensor value, std::vector<Node> parents, BackwardFn backward) {
  auto impl = std::make_shared<detail::NodeImpl>();
  impl->value = std::move(value);
  impl->is_leaf = false;
  impl->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const Node& p) { return p.requires_grad(); });
  if (impl->requires_grad) {
    impl->parents = std::move(parents);
    impl->backward = std::move(backward);
  }
  return Node(std::move(impl));
}

const Tensor& Node::value() const { return impl_->value; }

Tensor Node::grad() const {
  if (impl_->grad.empty()) return Tensor(impl_->value.shape());
  return impl_->grad;
}

bool Node::has_grad() const { return impl_ && !impl_->grad.empty(); }
bool Node::requires_grad() const { return impl_ && impl_->requires_grad; }
void Node::zero_grad() { impl_->grad = Tensor(); }

void Node::accumulate(const Tensor& g) const {
  if (!impl_->requires_grad) return;
  if (!g.same_shape(impl_->value)) {
    throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match value shape " +
                         shape_string(impl_->value.shape()));
  }
  if (impl_->grad.empty()) {
    impl_->grad = g;
  } else {
    auto dst = impl_->grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
}

void backward(const Node& root) {
  if (!root.defined() || root.value().size() != 1) {
    throw ContractError("backward() requires a scalar root");
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::NodeImpl*> order;
  std::unordered_set<detail::NodeImpl*> seen;
  std::vector<std::pair<detail::NodeImpl*, std::size_t>> stack;
  stack.emplace_back(root.impl_.get(), 0);
  seen.insert(root.impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::NodeImpl* p = node->parents[next++].impl_.get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order)
    if (!n->is_leaf) n->grad = Tensor();

  root.accumulate(Tensor(root.value().shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::NodeImpl* n = *it;
    if (n->is_leaf || n->grad.empty() || !n->backward) continue;
    n->backward(n->grad);
  }
}

// ---------------------------------------------------------------- linear algebra

Node matmul(const Node& a, const Node& b) {
  Tensor out = loopq::matmul(a.value(), b.value());
  check_finite(out, "matmul");
  return Node::make(std::move(out), {a, b}, [a, b](const Tensor& g) {
    if (a.requires_grad()) {
      Tensor ga(a.value().shape());
      view(ga).noalias() = view(g) * view(b.value()).transpose();
      a.accumulate(ga);
    }
    if (b.requires_grad()) {
      Tensor gb(b.value().shape());
      view(gb).noalias() = view(a.value()).transpose() * view(g);
      b.accumulate(gb);
    }
  });
}

Node linear(const Node& x, const Node& w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.cols() != wv.cols()) {
    throw DimensionError("linear: input " + shape_string(xv.shape()) + " vs weight " + shape_string(wv.shape()));
  }
  Tensor out({xv.rows(), wv.rows()});
  view(out).noalias() = view(xv) * view(wv).transpose();
  check_finite(out, "linear");
  return Node::make(std::move(out), {x, w}, [x, w](const Tensor& g) {
    if (x.requires_grad()) {
      Tensor gx(x.value().shape());
      view(gx).noalias() = view(g) * view(w.value());
      x.accumulate(gx);
    }
    if (w.requires_grad()) {
      Tensor gw(w.value().shape());
      view(gw).noalias() = view(g).transpose() * view(x.value());
      w.accumulate(gw);
    }
  });
}

Node transpose(const Node& a) {
  return Node::make(a.value().transposed(), {a}, [a](const Tensor& g) { a.accumulate(g.transposed()); });
}

Node inverse(const Node& a) {
  const Tensor& av = a.value();
  if (av.rows() != av.cols()) throw DimensionError("inverse of non-square matrix");
  Eigen::PartialPivLU<RowMajor> lu(view(av));
  if (!std::isfinite(lu.determinant()) || lu.determinant() == 0.0) {
    throw NumericError("inverse: matrix is singular");
  }
  Tensor inv(av.shape());
  view(inv) = lu.inverse();
  check_finite(inv, "inverse");
  return Node::make(inv, {a}, [a, inv](const Tensor& g) {
    // d(A^-1) = -A^-1 dA A^-1  =>  gA = -A^-T g A^-T
    Tensor ga(a.value().shape());
    view(ga).noalias() = -(view(inv).transpose() * view(g) * view(inv).transpose());
    a.accumulate(ga);
  });
}

Node kron(const Node& a, const Node& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t p = av.rows(), q = av.cols(), r = bv.rows(), s = bv.cols();
  Tensor out({p * r, q * s});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j)
      for (std::size_t k = 0; k < r; ++k)
        for (std::size_t l = 0; l < s; ++l) out(i * r + k, j * s + l) = av(i, j) * bv(k, l);
  return Node::make(std::move(out), {a, b}, [a, b, p, q, r, s](const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor ga(av.shape()), gb(bv.shape());
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j)
        for (std::size_t k = 0; k < r; ++k)
          for (std::size_t l = 0; l < s; ++l) {
            const double gv = g(i * r + k, j * s + l);
            ga(i, j) += gv * bv(k, l);
            gb(k, l) += gv * av(i, j);
          }
    a.accumulate(ga);
    b.accumulate(gb);
  });
}

// ---------------------------------------------------------------- elementwise

Node add(const Node& a, const Node& b) {
  const Bcast mode = broadcast_mode(a.value(), b.value(), "add");
  const std::size_t cols = cols_of(a.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[bidx(mode, i, cols)];
  check_finite(out, "add");
  return Node::make(std::move(out), {a, b}, [a, b, mode](const Tensor& g) {
    a.accumulate(g);
    if (b.requires_grad()) b.accumulate(reduce_to(g, mode, b.value().shape()));
  });
}

Node sub(const Node& a, const Node& b) {
  const Bcast mode = broadcast_mode(a.value(), b.value(), "sub");
  const std::size_t cols = cols_of(a.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[bidx(mode, i, cols)];
  check_finite(out, "sub");
  return Node::make(std::move(out), {a, b}, [a, b, mode](const Tensor& g) {
    a.accumulate(g);
    if (b.requires_grad()) b.accumulate(scaled(reduce_to(g, mode, b.value().shape()), -1.0));
  });
}

Node mul(const Node& a, const Node& b) {
  const Bcast mode = broadcast_mode(a.value(), b.value(), "mul");
  const std::size_t cols = cols_of(a.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[bidx(mode, i, cols)];
  check_finite(out, "mul");
  return Node::make(std::move(out), {a, b}, [a, b, mode, cols](const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (a.requires_grad()) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[bidx(mode, i, cols)];
      a.accumulate(ga);
    }
    if (b.requires_grad()) {
      Tensor gab = g;
      for (std::size_t i = 0; i < gab.size(); ++i) gab[i] *= av[i];
      b.accumulate(reduce_to(gab, mode, bv.shape()));
    }
  });
}

Node div(const Node& a, const Node& b) {
  const Bcast mode = broadcast_mode(a.value(), b.value(), "div");
  for (double v : b.value().data())
    if (v == 0.0) throw NumericError("div: division by zero");
  const std::size_t cols = cols_of(a.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[bidx(mode, i, cols)];
  check_finite(out, "div");
  return Node::make(std::move(out), {a, b}, [a, b, mode, cols](const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (a.requires_grad()) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= bv[bidx(mode, i, cols)];
      a.accumulate(ga);
    }
    if (b.requires_grad()) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) {
        const double d = bv[bidx(mode, i, cols)];
        gb[i] *= -av[i] / (d * d);
      }
      b.accumulate(reduce_to(gb, mode, bv.shape()));
    }
  });
}

Node scale(const Node& a, double s) {
  return Node::make(scaled(a.value(), s), {a}, [a, s](const Tensor& g) { a.accumulate(scaled(g, s)); });
}

Node add_scalar(const Node& a, double s) {
  Tensor out = map_values(a.value(), [s](double v) { return v + s; });
  return Node::make(std::move(out), {a}, [a](const Tensor& g) { a.accumulate(g); });
}

Node sqrt(const Node& a) {
  for (double v : a.value().data())
    if (v < 0.0) throw NumericError("sqrt of negative value");
  Tensor out = map_values(a.value(), [](double v) { return std::sqrt(v); });
  return Node::make(out, {a}, [a, out](const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= 2.0 * out[i];
    a.accumulate(ga);
  });
}

Node square(const Node& a) {
  Tensor out = map_values(a.value(), [](double v) { return v * v; });
  check_finite(out, "square");
  return Node::make(std::move(out), {a}, [a](const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 2.0 * a.value()[i];
    a.accumulate(ga);
  });
}

Node silu(const Node& a) {
  Tensor out = map_values(a.value(), [](double v) { return v / (1.0 + std::exp(-v)); });
  return Node::make(std::move(out), {a}, [a](const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double x = a.value()[i];
      const double sig = 1.0 / (1.0 + std::exp(-x));
      ga[i] *= sig * (1.0 + x * (1.0 - sig));
    }
    a.accumulate(ga);
  });
}

Node clip(const Node& a, double lo, double hi) {
  Tensor out = map_values(a.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); });
  return Node::make(std::move(out), {a}, [a, lo, hi](const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double v = a.value()[i];
      if (v < lo || v > hi) ga[i] = 0.0;
    }
    a.accumulate(ga);
  });
}

Node round_ste(const Node& a) {
  // nearbyint honours the default FE_TONEAREST mode: ties go to even.
  Tensor out = map_values(a.value(), [](double v) { return std::nearbyint(v); });
  return Node::make(std::move(out), {a}, [a](const Tensor& g) { a.accumulate(g); });
}

Node round_ste(const Node& a, double lo, double hi) {
  Tensor out = map_values(a.value(), [lo, hi](double v) { return std::clamp(std::nearbyint(v), lo, hi); });
  return Node::make(std::move(out), {a}, [a, lo, hi](const Tensor& g) {
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double v = a.value()[i];
      if (v < lo || v > hi) ga[i] = 0.0;
    }
    a.accumulate(ga);
  });
}

Node straight_through(const Node& a, Tensor forward_value) {
  if (!forward_value.same_shape(a.value())) throw DimensionError("straight_through: shape mismatch");
  return Node::make(std::move(forward_value), {a}, [a](const Tensor& g) { a.accumulate(g); });
}

// ---------------------------------------------------------------- reductions

Node sum(const Node& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return Node::make(Tensor::scalar(s), {a},
                    [a](const Tensor& g) { a.accumulate(Tensor(a.value().shape(), g.item())); });
}

Node mean(const Node& a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return Node::make(Tensor::scalar(s / n), {a},
                    [a, n](const Tensor& g) { a.accumulate(Tensor(a.value().shape(), g.item() / n)); });
}

Node mean_squared_error(const Node& a, const Node& b) {
  if (!a.value().same_shape(b.value())) throw DimensionError("mean_squared_error: shape mismatch");
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return Node::make(Tensor::scalar(s / n), {a, b}, [a, b, n](const Tensor& g) {
    Tensor ga(a.value().shape());
    const double k = 2.0 * g.item() / n;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = k * (a.value()[i] - b.value()[i]);
    if (b.requires_grad()) b.accumulate(scaled(ga, -1.0));
    a.accumulate(ga);
  });
}

// ---------------------------------------------------------------- fused layers

Node rms_norm(const Node& x, double eps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (d == 0) throw DimensionError("rms_norm on zero-width input");
  Tensor out(xv.shape());
  std::vector<double> inv_rms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xv(i, j) * xv(i, j);
    inv_rms[i] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out(i, j) = xv(i, j) * inv_rms[i];
  }
  check_finite(out, "rms_norm");
  return Node::make(out, {x}, [x, out, inv_rms, n, d](const Tensor& g) {
    Tensor gx(out.shape());
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g(i, j) * out(i, j);
      dot /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) gx(i, j) = (g(i, j) - out(i, j) * dot) * inv_rms[i];
    }
    x.accumulate(gx);
  });
}

Node causal_attention(const Node& q, const Node& k, const Node& v, std::size_t seq_len, std::size_t heads) {
  const Tensor& qv = q.value();
  const std::size_t rows = qv.rows(), d = qv.cols();
  if (!k.value().same_shape(qv) || !v.value().same_shape(qv)) throw DimensionError("attention: q/k/v shapes differ");
  if (seq_len == 0 || rows % seq_len != 0) throw DimensionError("attention: rows not a multiple of seq_len");
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  const std::size_t nb = rows / seq_len, dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[(b*heads + h)] is a seq_len x seq_len lower-triangular row-stochastic block.
  auto probs = std::make_shared<std::vector<double>>(nb * heads * seq_len * seq_len, 0.0);
  Tensor out({rows, d});
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = probs->data() + (b * heads + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const std::size_t qi = b * seq_len + i;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const std::size_t kj = b * seq_len + j;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qv(qi, h * dh + c) * kv(kj, h * dh + c);
          P[i * seq_len + j] = s * inv_sqrt;
          mx = std::max(mx, P[i * seq_len + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += (P[i * seq_len + j] = std::exp(P[i * seq_len + j] - mx));
        for (std::size_t j = 0; j <= i; ++j) P[i * seq_len + j] /= z;
        for (std::size_t j = 0; j <= i; ++j) {
          const double p = P[i * seq_len + j];
          const std::size_t vj = b * seq_len + j;
          for (std::size_t c = 0; c < dh; ++c) out(qi, h * dh + c) += p * vv(vj, h * dh + c);
        }
      }
    }
  check_finite(out, "causal_attention");
  return Node::make(std::move(out), {q, k, v}, [q, k, v, probs, seq_len, heads, nb, dh, inv_sqrt](const Tensor& g) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    Tensor gq(qv.shape()), gk(kv.shape()), gv(vv.shape());
    std::vector<double> dp(seq_len);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const double* P = probs->data() + (b * heads + h) * seq_len * seq_len;
        for (std::size_t i = 0; i < seq_len; ++i) {
          const std::size_t qi = b * seq_len + i;
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            const std::size_t vj = b * seq_len + j;
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) {
              s += g(qi, h * dh + c) * vv(vj, h * dh + c);
              gv(vj, h * dh + c) += P[i * seq_len + j] * g(qi, h * dh + c);
            }
            dp[j] = s;
            dot += s * P[i * seq_len + j];
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const double ds = P[i * seq_len + j] * (dp[j] - dot) * inv_sqrt;
            const std::size_t kj = b * seq_len + j;
            for (std::size_t c = 0; c < dh; ++c) {
              gq(qi, h * dh + c) += ds * kv(kj, h * dh + c);
              gk(kj, h * dh + c) += ds * qv(qi, h * dh + c);
            }
          }
        }
      }
    q.accumulate(gq);
    k.accumulate(gk);
    v.accumulate(gv);
  });
}

Node expand_groups(const Node& c, std::size_t group_size) {
  const Tensor& cv = c.value();
  if (cv.rows() != 1 || group_size == 0) throw DimensionError("expand_groups expects a 1 x g row");
  const std::size_t g = cv.cols();
  Tensor out({1, g * group_size});
  for (std::size_t i = 0; i < g * group_size; ++i) out[i] = cv[i / group_size];
  return Node::make(std::move(out), {c}, [c, g, group_size](const Tensor& grad) {
    Tensor gc({1, g});
    for (std::size_t i = 0; i < grad.size(); ++i) gc[i / group_size] += grad[i];
    c.accumulate(gc);
  });
}

Node embedding(const Node& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  const std::size_t vocab = tv.rows(), d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) throw ContractError("token id out of vocabulary");
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return Node::make(std::move(out), {table}, [table, idv, d](const Tensor& g) {
    Tensor gt(table.value().shape());
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt(static_cast<std::size_t>(idv[i]), j) += g(i, j);
    table.accumulate(gt);
  });
}

Node cross_entropy(const Node& logits, std::span<const int> targets) {
  const Tensor& z = logits.value();
  const std::size_t n = z.rows(), vocab = z.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy: target count differs from rows");
  Tensor probs(z.shape());
  double loss = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= vocab) throw ContractError("target out of vocabulary");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) mx = std::max(mx, z(i, j));
    double zs = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) zs += (probs(i, j) = std::exp(z(i, j) - mx));
    for (std::size_t j = 0; j < vocab; ++j) probs(i, j) /= zs;
    loss -= z(i, static_cast<std::size_t>(t)) - mx - std::log(zs);
    ++counted;
  }
  if (counted == 0) throw ContractError("cross_entropy: every target is ignored");
  const double denom = static_cast<double>(counted);
  std::vector<int> tv(targets.begin(), targets.end());
  return Node::make(Tensor::scalar(loss / denom), {logits}, [logits, probs, tv, n, denom](const Tensor& g) {
    Tensor gz = probs;
    for (std::size_t i = 0; i < n; ++i)
      if (tv[i] >= 0) gz(i, static_cast<std::size_t>(tv[i])) -= 1.0;
    logits.accumulate(scaled(gz, g.item() / denom));
  });
}

Node kl_divergence(const Tensor& teacher_logits, const Node& student_logits, double temperature, std::size_t top_k) {
  const Tensor& s = student_logits.value();
  if (!teacher_logits.same_shape(s)) throw DimensionError("kl_divergence: logits shapes differ");
  if (temperature <= 0.0) throw ParameterError("kl_divergence: temperature must be positive");
  const std::size_t n = s.rows(), vocab = s.cols();
  const std::size_t k = (top_k == 0 || top_k >= vocab) ? vocab : top_k;

  // Per row: selected indices, teacher probs p, student probs q over the selection.
  auto sel = std::make_shared<std::vector<std::size_t>>(n * k);
  auto pq = std::make_shared<std::vector<double>>(2 * n * k);
  std::vector<std::size_t> idx(vocab);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (k < vocab) {
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                        [&](std::size_t a, std::size_t b) {
                          const double ta = teacher_logits(i, a), tb = teacher_logits(i, b);
                          return ta > tb || (ta == tb && a < b);
                        });
    }
    std::size_t* row_sel = sel->data() + i * k;
    double* p = pq->data() + 2 * i * k;
    double* q = p + k;
    double tmax = -std::numeric_limits<double>::infinity(), smax = tmax;
    for (std::size_t j = 0; j < k; ++j) {
      row_sel[j] = idx[j];
      tmax = std::max(tmax, teacher_logits(i, idx[j]) / temperature);
      smax = std::max(smax, s(i, idx[j]) / temperature);
    }
    double tz = 0.0, sz = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      tz += (p[j] = std::exp(teacher_logits(i, row_sel[j]) / temperature - tmax));
      sz += (q[j] = std::exp(s(i, row_sel[j]) / temperature - smax));
    }
    const double log_tz = std::log(tz), log_sz = std::log(sz);
    for (std::size_t j = 0; j < k; ++j) {
      const double logp = teacher_logits(i, row_sel[j]) / temperature - tmax - log_tz;
      const double logq = s(i, row_sel[j]) / temperature - smax - log_sz;
      p[j] /= tz;
      q[j] /= sz;
      if (p[j] > 0.0) total += p[j] * (logp - logq);
    }
  }
  const double value = total / static_cast<double>(n);
  if (!std::isfinite(value)) throw NumericError("non-finite KL divergence");
  return Node::make(Tensor::scalar(value), {student_logits},
                    [student_logits, sel, pq, n, k, temperature](const Tensor& g) {
                      Tensor gs(student_logits.value().shape());
                      const double coef = g.item() / (static_cast<double>(n) * temperature);
                      for (std::size_t i = 0; i < n; ++i) {
                        const double* p = pq->data() + 2 * i * k;
                        const double* q = p + k;
                        for (std::size_t j = 0; j < k; ++j) gs(i, (*sel)[i * k + j]) = coef * (q[j] - p[j]);
                      }
                      student_logits.accumulate(gs);
                    });
}

}  // namespace loopq
