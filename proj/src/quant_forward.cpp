#include "loopq/quant_forward.hpp"

#include <algorithm>

#include "loopq/errors.hpp"
#include "loopq/linalg.hpp"

namespace loopq {

TransitionAdapters TransitionAdapters::identity(std::size_t d, std::size_t loops, std::size_t rank,
                                                std::uint64_t seed) {
  if (rank == 0 || rank > d) throw ConfigError("adapter rank must be in [1, d]");
  TransitionAdapters ad;
  ad.rank = rank;
  const std::size_t n = loops > 0 ? loops - 1 : 0;
  ad.a.assign(n, Tensor::full(1, d, 1.0));
  ad.b.assign(n, Tensor::zeros(1, d));
  ad.eta.assign(n, Tensor::zeros(1, rank));
  Rng rng(seed);
  ad.u = rng.normal_matrix(d, rank, 1e-3);
  ad.v = rng.normal_matrix(d, rank, 1e-3);
  return ad;
}

std::size_t TransitionAdapters::parameter_count() const {
  if (!enabled()) return 0;
  std::size_t n = u.size() + v.size();
  for (std::size_t t = 0; t < a.size(); ++t) n += a[t].size() + b[t].size() + eta[t].size();
  return n;
}

namespace {

Node cta_graph(const Node& h, const Node& a, const Node& b, const Node& eta, const Node& u, const Node& v,
               double eps) {
  const Node r = rms_norm(h, eps);
  Node out = add(h, mul(r, add_scalar(a, -1.0)));
  out = add(out, b);
  return add(out, matmul(mul(matmul(r, v), eta), transpose(u)));
}

}  // namespace

Tensor apply_cta(const TransitionAdapters& ad, const Tensor& h, std::size_t t) {
  if (t >= ad.transitions())
    throw ContractError("no loop transition " + std::to_string(t) + " (adapters cover " +
                        std::to_string(ad.transitions()) + ")");
  if (h.rank() != 2 || h.cols() != ad.a[t].cols()) throw DimensionError("apply_cta: state width mismatch");
  auto c = [](const Tensor& x) { return Node::constant(x); };
  return cta_graph(c(h), c(ad.a[t]), c(ad.b[t]), c(ad.eta[t]), c(ad.u), c(ad.v), ad.norm_eps).value();
}

// --------------------------------------------------------------- binding

Binder::Binder(const QuantScheme& scheme, const TransitionAdapters& adapters, QuantForwardOptions options)
    : scheme_(scheme), adapters_(adapters), options_(std::move(options)) {
  if (!options_.split_groups.empty() && options_.split_groups.size() != scheme.groups.size())
    throw ContractError("split_groups must cover every group");
}

Node Binder::bind(const SlotKey& key, const Tensor& value, bool trainable) {
  if (auto it = nodes_.find(key); it != nodes_.end()) return it->second;
  Node n = trainable ? Node::leaf(value) : Node::constant(value);
  nodes_.emplace(key, n);
  if (trainable) leaves_.emplace(key, n);
  return n;
}

const Binder::BoundTransform& Binder::transform(std::size_t g, std::size_t t) {
  const GroupScheme& gs = scheme_.groups.at(g);
  const bool split = !options_.split_groups.empty() && options_.split_groups[g];
  SlotKey key{Slot::transform_a, g, 0, false};
  if (gs.transform_untied() || split) {
    key.per_loop = true;
    key.loop = std::min(t, scheme_.loops - 1);
  }
  if (auto it = transforms_.find(key); it != transforms_.end()) return it->second;

  const TransformParam& param = gs.transform(t);
  BoundTransform bt;
  if (param.mode != TransformMode::identity) {
    const bool trainable = param.trainable() && (options_.train.trains_transform(g) || split);
    const Node a = bind(key, param.a, trainable);
    if (param.kronecker) {
      SlotKey kb = key;
      kb.slot = Slot::transform_b;
      const Node b = bind(kb, param.b, trainable);
      bt.p = kron(a, b);
      bt.inv_t = transpose(kron(inverse(a), inverse(b)));
    } else {
      bt.p = a;
      bt.inv_t = transpose(inverse(a));
    }
  }
  return transforms_.emplace(key, std::move(bt)).first->second;
}

Node Binder::scale(std::size_t g, std::size_t t) {
  const GroupScheme& gs = scheme_.groups.at(g);
  SlotKey key{Slot::scale, g, 0, false};
  if (gs.scales_per_loop()) {
    key.per_loop = true;
    key.loop = std::min(t, gs.loop_scales.size() - 1);
  }
  return bind(key, gs.scale(t), options_.train.scales);
}

namespace {

std::size_t transition_index(const TransitionAdapters& ad, std::size_t t) {
  if (!ad.enabled()) throw ContractError("adapters are disabled");
  return std::min(t, ad.transitions() - 1);
}

}  // namespace

Node Binder::cta_a(std::size_t t) {
  const std::size_t k = transition_index(adapters_, t);
  return bind({Slot::cta_a, 0, k, true}, adapters_.a[k], options_.train.adapters);
}

Node Binder::cta_b(std::size_t t) {
  const std::size_t k = transition_index(adapters_, t);
  return bind({Slot::cta_b, 0, k, true}, adapters_.b[k], options_.train.adapters);
}

Node Binder::cta_eta(std::size_t t) {
  const std::size_t k = transition_index(adapters_, t);
  return bind({Slot::cta_eta, 0, k, true}, adapters_.eta[k], options_.train.adapters);
}

Node Binder::cta_u() { return bind({Slot::cta_u, 0, 0, false}, adapters_.u, options_.train.adapters); }
Node Binder::cta_v() { return bind({Slot::cta_v, 0, 0, false}, adapters_.v, options_.train.adapters); }

Tensor& locate(QuantScheme& scheme, TransitionAdapters& adapters, const SlotKey& key) {
  auto loop_item = [&](std::vector<Tensor>& v) -> Tensor& {
    if (!key.per_loop || key.loop >= v.size()) throw ContractError("adapter slot out of range");
    return v[key.loop];
  };
  switch (key.slot) {
    case Slot::transform_a:
    case Slot::transform_b: {
      GroupScheme& g = scheme.groups.at(key.group);
      if (key.per_loop != g.transform_untied()) throw ContractError("transform slot does not match sharing mode");
      TransformParam& p = key.per_loop ? g.per_loop.at(key.loop) : *g.shared;
      return key.slot == Slot::transform_a ? p.a : p.b;
    }
    case Slot::scale: {
      GroupScheme& g = scheme.groups.at(key.group);
      if (key.per_loop != g.scales_per_loop()) throw ContractError("scale slot does not match sharing mode");
      return key.per_loop ? g.loop_scales.at(key.loop) : g.shared_scale;
    }
    case Slot::cta_a: return loop_item(adapters.a);
    case Slot::cta_b: return loop_item(adapters.b);
    case Slot::cta_eta: return loop_item(adapters.eta);
    case Slot::cta_u: return adapters.u;
    case Slot::cta_v: return adapters.v;
  }
  throw ContractError("unknown slot");
}

Node apply_cta(Binder& binder, const Node& h, std::size_t t) {
  return cta_graph(h, binder.cta_a(t), binder.cta_b(t), binder.cta_eta(t), binder.cta_u(), binder.cta_v(),
                   binder.adapters().norm_eps);
}

// --------------------------------------------------------------- execution

namespace {

class QuantizedLinear final : public GroupLinear {
 public:
  explicit QuantizedLinear(Binder& binder) : binder_(binder) {}
  std::size_t loop = 0;

  std::vector<Node> apply(std::size_t g, const Node& x, std::span<const Node> weights) override {
    const QuantSpec& spec = binder_.scheme().spec;
    const Binder::BoundTransform& tr = binder_.transform(g, loop);
    const Node xp = tr.p.defined() ? matmul(x, tr.p) : x;
    const Node xq = quantize_act(xp, binder_.scale(g, loop), spec.bits_a, spec.group_size);
    std::vector<Node> out;
    out.reserve(weights.size());
    for (const Node& w : weights) {
      const auto key = std::make_pair(tr.p.id(), w.id());
      auto it = cache_.find(key);
      if (it == cache_.end()) {
        const Node folded = tr.p.defined() ? matmul(w, tr.inv_t) : w;
        it = cache_.emplace(key, quantize_weight(folded, spec.bits_w, spec.group_size)).first;
      }
      out.push_back(linear(xq, it->second));
    }
    return out;
  }

 private:
  Binder& binder_;
  std::map<std::pair<const void*, const void*>, Node> cache_;
};

}  // namespace

Trajectory QuantTrajectory::values() const {
  Trajectory out;
  out.states.resize(states.size());
  for (std::size_t t = 0; t < states.size(); ++t)
    for (const Node& n : states[t]) out.states[t].push_back(n.value());
  out.final_state = final_state.value();
  out.logits = logits.value();
  return out;
}

QuantTrajectory quantized_forward(const LoopedModel& model, const TokenBatch& batch, Binder& binder) {
  const ModelConfig& cfg = model.config;
  batch.validate(cfg.vocab);
  const QuantScheme& scheme = binder.scheme();
  if (scheme.groups.size() != transform_groups(cfg).size()) throw ContractError("scheme does not match the model");
  const std::size_t loops = binder.loops();
  const ModelNodes nodes = ModelNodes::constants(model);
  QuantizedLinear lin(binder);
  QuantTrajectory q;
  q.states.resize(loops);
  Node h = embed_tokens(nodes, batch);
  for (std::size_t t = 0; t < loops; ++t) {
    q.states[t].push_back(h);
    lin.loop = t;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      try {
        h = run_layer(cfg, nodes, l, h, batch.seq_len, lin);
      } catch (const NumericError& e) {
        throw NumericError("non-finite quantized state at loop " + std::to_string(t) + ", layer " +
                           std::to_string(l + 1) + ": " + e.what());
      }
      q.states[t].push_back(h);
    }
    if (t + 1 < loops && binder.adapters().enabled()) h = apply_cta(binder, h, t);
  }
  q.final_state = q.states.back().back();
  q.logits = output_logits(cfg, nodes, q.final_state);
  return q;
}

Trajectory quantized_forward(const LoopedModel& model, const QuantScheme& scheme, const TransitionAdapters& adapters,
                             const TokenBatch& batch, std::size_t loops) {
  Binder binder(scheme, adapters, {TrainableMask{}, {}, loops});
  return quantized_forward(model, batch, binder).values();
}

namespace {

Tensor run_quantized_layers(const LoopedModel& model, const QuantScheme& scheme, const Tensor& h, std::size_t t,
                            std::size_t first, std::size_t last, std::size_t seq_len) {
  const ModelConfig& cfg = model.config;
  if (t >= scheme.loops)
    throw ContractError("loop index " + std::to_string(t) + " outside [0, " + std::to_string(scheme.loops) + ")");
  if (h.rank() != 2 || h.rows() == 0 || h.cols() != cfg.d) throw DimensionError("quantized layer: bad state shape");
  const TransitionAdapters none;
  Binder binder(scheme, none, {});
  QuantizedLinear lin(binder);
  lin.loop = t;
  const ModelNodes nodes = ModelNodes::constants(model);
  Node x = Node::constant(h);
  for (std::size_t l = first; l < last; ++l) x = run_layer(cfg, nodes, l, x, seq_len ? seq_len : h.rows(), lin);
  return x.value();
}

}  // namespace

Tensor quantized_layer_forward(const LoopedModel& model, const QuantScheme& scheme, const Tensor& h, std::size_t t,
                               std::size_t layer, std::size_t seq_len) {
  if (layer >= model.config.layers) throw ContractError("layer index out of range");
  return run_quantized_layers(model, scheme, h, t, layer, layer + 1, seq_len);
}

Tensor quantized_loop_function(const LoopedModel& model, const QuantScheme& scheme, const Tensor& h, std::size_t t,
                               std::size_t seq_len) {
  return run_quantized_layers(model, scheme, h, t, 0, model.config.layers, seq_len);
}

}  // namespace loopq
