#include "loopq/model.hpp"

#include <cmath>

#include "loopq/errors.hpp"
#include "loopq/linalg.hpp"
#include "loopq/optim.hpp"

namespace loopq {

void ModelConfig::validate() const {
  if (loops < 1) throw ConfigError("loops (T) must be >= 1");
  if (layers < 1) throw ConfigError("layers (L) must be >= 1");
  if (d < 1) throw ConfigError("hidden width d must be >= 1");
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  if (kind == LayerKind::block) {
    if (heads < 1 || d % heads != 0) throw ConfigError("d must be divisible by the attention head count");
    if (ffn < 1) throw ConfigError("ffn width must be >= 1");
  }
  if (max_seq < 1) throw ConfigError("max_seq must be >= 1");
  if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
  if (init_std < 0.0) throw ConfigError("init_std must be non-negative");
}

double ModelConfig::effective_init_std() const {
  if (init_std > 0.0) return init_std;
  if (kind == LayerKind::linear) return 1.0 / std::sqrt(static_cast<double>(d));
  return 0.02 / std::sqrt(static_cast<double>(layers));
}

std::size_t LoopedModel::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->size();
  return n;
}

std::vector<const Tensor*> LoopedModel::tensors() const {
  std::vector<const Tensor*> out{&embed, &proj};
  for (const auto& l : layers) {
    if (config.kind == LayerKind::linear) {
      out.push_back(&l.w);
    } else {
      for (const Tensor* t : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w_gate, &l.w_up, &l.w_down})
        out.push_back(t);
    }
  }
  return out;
}

std::vector<Tensor*> LoopedModel::tensors() {
  std::vector<Tensor*> out;
  for (const Tensor* t : std::as_const(*this).tensors()) out.push_back(const_cast<Tensor*>(t));
  return out;
}

void TokenBatch::validate(std::size_t vocab) const {
  if (batch == 0 || seq_len == 0) throw ContractError("empty token batch");
  if (ids.size() != batch * seq_len) throw DimensionError("token batch size does not match batch * seq_len");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw ContractError("token id out of vocabulary");
}

const Tensor& Trajectory::loop_input(std::size_t t) const {
  if (t == states.size()) return final_state;
  return states.at(t).front();
}

const Tensor& Trajectory::loop_output(std::size_t t) const { return states.at(t).back(); }

// --------------------------------------------------------------- groups

std::string group_kind_name(GroupKind kind) {
  switch (kind) {
    case GroupKind::qkv: return "qkv";
    case GroupKind::o_proj: return "o_proj";
    case GroupKind::up_gate: return "up_gate";
    case GroupKind::down: return "down";
    case GroupKind::linear: return "linear";
  }
  return "?";
}

GroupKind parse_group_kind(const std::string& name) {
  for (GroupKind k : {GroupKind::qkv, GroupKind::o_proj, GroupKind::up_gate, GroupKind::down, GroupKind::linear})
    if (group_kind_name(k) == name) return k;
  throw ConfigError("unknown group kind '" + name + "'");
}

std::string GroupId::name() const { return "L" + std::to_string(layer) + "." + group_kind_name(kind); }

std::vector<GroupId> transform_groups(const ModelConfig& config) {
  std::vector<GroupId> out;
  for (std::size_t l = 0; l < config.layers; ++l) {
    if (config.kind == LayerKind::linear) {
      out.push_back({l, GroupKind::linear});
    } else {
      for (GroupKind k : {GroupKind::qkv, GroupKind::o_proj, GroupKind::up_gate, GroupKind::down})
        out.push_back({l, k});
    }
  }
  return out;
}

std::size_t group_input_dim(const ModelConfig& config, GroupKind kind) {
  return kind == GroupKind::down ? config.ffn : config.d;
}

std::vector<const Tensor*> group_weights(const LoopedModel& model, const GroupId& group) {
  const LayerWeights& l = model.layers.at(group.layer);
  switch (group.kind) {
    case GroupKind::qkv: return {&l.wq, &l.wk, &l.wv};
    case GroupKind::o_proj: return {&l.wo};
    case GroupKind::up_gate: return {&l.w_gate, &l.w_up};
    case GroupKind::down: return {&l.w_down};
    case GroupKind::linear: return {&l.w};
  }
  return {};
}

// --------------------------------------------------------------- execution

std::vector<Node> FullPrecisionLinear::apply(std::size_t, const Node& x, std::span<const Node> weights) {
  std::vector<Node> out;
  out.reserve(weights.size());
  for (const Node& w : weights) out.push_back(linear(x, w));
  return out;
}

namespace {

template <typename MakeNode>
ModelNodes lift(const LoopedModel& model, MakeNode make) {
  ModelNodes n;
  n.embed = make(model.embed);
  n.proj = make(model.proj);
  for (const auto& l : model.layers) {
    LayerNodes ln;
    if (model.config.kind == LayerKind::linear) {
      ln.w = make(l.w);
    } else {
      ln.attn_norm = make(l.attn_norm);
      ln.wq = make(l.wq);
      ln.wk = make(l.wk);
      ln.wv = make(l.wv);
      ln.wo = make(l.wo);
      ln.mlp_norm = make(l.mlp_norm);
      ln.w_gate = make(l.w_gate);
      ln.w_up = make(l.w_up);
      ln.w_down = make(l.w_down);
    }
    n.layers.push_back(std::move(ln));
  }
  return n;
}

}  // namespace

ModelNodes ModelNodes::constants(const LoopedModel& model) {
  return lift(model, [](const Tensor& t) { return Node::constant(t); });
}

ModelNodes ModelNodes::trainable(const LoopedModel& model) {
  return lift(model, [](const Tensor& t) { return Node::leaf(t); });
}

std::vector<Node> ModelNodes::all() const {
  std::vector<Node> out{embed, proj};
  for (const auto& l : layers) {
    if (l.w.defined()) {
      out.push_back(l.w);
    } else {
      for (const Node* n : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w_gate, &l.w_up, &l.w_down})
        out.push_back(*n);
    }
  }
  return out;
}

Node embed_tokens(const ModelNodes& nodes, const TokenBatch& batch) { return embedding(nodes.embed, batch.ids); }

Node output_logits(const ModelConfig& config, const ModelNodes& nodes, const Node& h) {
  return linear(rms_norm(h, config.norm_eps), nodes.proj);
}

Node run_layer(const ModelConfig& config, const ModelNodes& nodes, std::size_t layer, const Node& h,
               std::size_t seq_len, GroupLinear& lin) {
  const LayerNodes& w = nodes.layers.at(layer);
  if (config.kind == LayerKind::linear) {
    const Node weights[] = {w.w};
    return lin.apply(layer, h, weights).front();
  }
  const std::size_t base = layer * 4;
  const Node a = mul(rms_norm(h, config.norm_eps), w.attn_norm);
  const Node qkv_w[] = {w.wq, w.wk, w.wv};
  const auto qkv = lin.apply(base + 0, a, qkv_w);
  const Node attn = causal_attention(qkv[0], qkv[1], qkv[2], seq_len, config.heads);
  const Node o_w[] = {w.wo};
  const Node h1 = add(h, lin.apply(base + 1, attn, o_w).front());

  const Node m = mul(rms_norm(h1, config.norm_eps), w.mlp_norm);
  const Node ug_w[] = {w.w_gate, w.w_up};
  const auto gate_up = lin.apply(base + 2, m, ug_w);
  const Node u = mul(silu(gate_up[0]), gate_up[1]);
  const Node down_w[] = {w.w_down};
  return add(h1, lin.apply(base + 3, u, down_w).front());
}

// --------------------------------------------------------------- model API

LoopedModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const double std = config.effective_init_std();
  const std::size_t d = config.d;
  LoopedModel m;
  m.config = config;
  m.embed = rng.normal_matrix(config.vocab, d, 1.0);
  m.proj = rng.normal_matrix(config.vocab, d, 1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights w;
    if (config.kind == LayerKind::linear) {
      w.w = rng.normal_matrix(d, d, std);
    } else {
      w.attn_norm = Tensor::full(1, d, 1.0);
      w.wq = rng.normal_matrix(d, d, std);
      w.wk = rng.normal_matrix(d, d, std);
      w.wv = rng.normal_matrix(d, d, std);
      w.wo = rng.normal_matrix(d, d, std);
      w.mlp_norm = Tensor::full(1, d, 1.0);
      w.w_gate = rng.normal_matrix(config.ffn, d, std);
      w.w_up = rng.normal_matrix(config.ffn, d, std);
      w.w_down = rng.normal_matrix(d, config.ffn, std);
    }
    m.layers.push_back(std::move(w));
  }
  return m;
}

Trajectory forward(const LoopedModel& model, const TokenBatch& batch, bool record, std::size_t loops) {
  const ModelConfig& cfg = model.config;
  batch.validate(cfg.vocab);
  const std::size_t T = loops ? loops : cfg.loops;
  const ModelNodes nodes = ModelNodes::constants(model);
  FullPrecisionLinear lin;
  Trajectory traj;
  Node h = embed_tokens(nodes, batch);
  if (record) traj.states.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    if (record) traj.states[t].push_back(h.value());
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      try {
        h = run_layer(cfg, nodes, l, h, batch.seq_len, lin);
      } catch (const NumericError& e) {
        throw NumericError("non-finite hidden state at loop " + std::to_string(t) + ", layer " +
                           std::to_string(l + 1) + ": " + e.what());
      }
      if (record) traj.states[t].push_back(h.value());
    }
  }
  traj.final_state = h.value();
  traj.logits = output_logits(cfg, nodes, h).value();
  return traj;
}

Tensor loop_function(const LoopedModel& model, const Tensor& h, std::size_t seq_len) {
  const ModelConfig& cfg = model.config;
  if (h.rank() != 2 || h.cols() == 0 || h.rows() == 0) throw DimensionError("loop_function: empty input state");
  if (h.cols() != cfg.d) throw DimensionError("loop_function: state width differs from model width");
  const std::size_t n = seq_len ? seq_len : h.rows();
  const ModelNodes nodes = ModelNodes::constants(model);
  FullPrecisionLinear lin;
  Node x = Node::constant(h);
  for (std::size_t l = 0; l < cfg.layers; ++l) x = run_layer(cfg, nodes, l, x, n, lin);
  return x.value();
}

PretrainReport pretrain(LoopedModel& model, std::span<const TokenBatch> batches, std::size_t steps, double lr) {
  if (batches.empty() && steps > 0) throw ContractError("pretrain needs at least one batch");
  const ModelConfig& cfg = model.config;
  PretrainReport report;
  std::vector<AdamSlot> slots(model.tensors().size());
  FullPrecisionLinear lin;
  for (std::size_t step = 0; step < steps; ++step) {
    const TokenBatch& batch = batches[step % batches.size()];
    batch.validate(cfg.vocab);
    const ModelNodes nodes = ModelNodes::trainable(model);
    Node h = embed_tokens(nodes, batch);
    for (std::size_t t = 0; t < cfg.loops; ++t)
      for (std::size_t l = 0; l < cfg.layers; ++l) h = run_layer(cfg, nodes, l, h, batch.seq_len, lin);
    const Node logits = output_logits(cfg, nodes, h);

    std::vector<int> targets(batch.rows(), -1);
    for (std::size_t b = 0; b < batch.batch; ++b)
      for (std::size_t i = 0; i + 1 < batch.seq_len; ++i)
        targets[b * batch.seq_len + i] = batch.ids[b * batch.seq_len + i + 1];
    const Node loss = cross_entropy(logits, targets);
    backward(loss);
    report.losses.push_back(loss.value().item());

    const std::vector<Node> leaves = nodes.all();
    std::vector<Tensor> grads;
    grads.reserve(leaves.size());
    for (const Node& n : leaves) grads.push_back(n.grad());
    clip_grad_norm(grads, 1.0);
    const double rate = cosine_lr(lr, step, steps);
    auto params = model.tensors();
    for (std::size_t i = 0; i < params.size(); ++i) slots[i].update(*params[i], grads[i], rate);
  }
  return report;
}

}  // namespace loopq
