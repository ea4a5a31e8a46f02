#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "loopq/autodiff.hpp"
#include "loopq/tensor.hpp"

namespace loopq {

enum class LayerKind {
  block,   // pre-RMSNorm causal attention + SwiGLU MLP, each with a residual
  linear,  // H <- H W^T, the single-matrix form used for propagation analysis
};

struct ModelConfig {
  std::size_t vocab = 256;
  std::size_t d = 32;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  std::size_t layers = 2;  // L, shared stack depth
  std::size_t loops = 4;   // T
  std::size_t max_seq = 32;
  double norm_eps = 1e-6;
  /// 0 selects the default: 0.02/sqrt(L) for blocks, 1/sqrt(d) for the linear toy.
  double init_std = 0.0;
  LayerKind kind = LayerKind::block;

  void validate() const;  // throws ConfigError
  double effective_init_std() const;
};

struct LayerWeights {
  // block layers
  Tensor attn_norm, wq, wk, wv, wo;
  Tensor mlp_norm, w_gate, w_up, w_down;
  // linear-toy layers
  Tensor w;
};

/// Shared L-layer stack applied T times. Linear weights are stored (out, in).
struct LoopedModel {
  ModelConfig config;
  Tensor embed;  // vocab x d
  Tensor proj;   // vocab x d; logits = rms_norm(H_T) proj^T
  std::vector<LayerWeights> layers;

  std::size_t parameter_count() const;
  /// Every tensor in a fixed order (embed, proj, then per layer).
  std::vector<const Tensor*> tensors() const;
  std::vector<Tensor*> tensors();
};

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> ids;  // batch-major, batch * seq_len entries

  std::size_t rows() const noexcept { return batch * seq_len; }
  void validate(std::size_t vocab) const;
};

/// Recorded hidden states of one forward pass. states[t][l] is H_{t,l} for
/// t in [0,T), l in [0,L]; states[t][0] is the loop input H_t.
struct Trajectory {
  std::vector<std::vector<Tensor>> states;
  Tensor final_state;  // H_T
  Tensor logits;       // Z

  std::size_t loops() const noexcept { return states.size(); }
  const Tensor& loop_input(std::size_t t) const;
  /// H_{t,L}
  const Tensor& loop_output(std::size_t t) const;
};

// --------------------------------------------------------------- weight groups

/// Transform-weight group kinds; one transform feeds every weight in its group.
enum class GroupKind { qkv, o_proj, up_gate, down, linear };

struct GroupId {
  std::size_t layer = 0;
  GroupKind kind = GroupKind::qkv;

  std::string name() const;  // e.g. "L0.qkv"
  bool operator==(const GroupId&) const = default;
};

std::string group_kind_name(GroupKind kind);
GroupKind parse_group_kind(const std::string& name);
/// All groups in execution order (layer-major).
std::vector<GroupId> transform_groups(const ModelConfig& config);
std::size_t group_input_dim(const ModelConfig& config, GroupKind kind);
/// Weights consuming a group's transformed activations.
std::vector<const Tensor*> group_weights(const LoopedModel& model, const GroupId& group);

// --------------------------------------------------------------- execution

/// Hook through which every grouped linear map is executed. The full-precision
/// runtime multiplies directly; the quantized runtime transforms and quantizes.
class GroupLinear {
 public:
  virtual ~GroupLinear() = default;
  /// Returns x W^T for each W in `weights`.
  virtual std::vector<Node> apply(std::size_t group_index, const Node& x, std::span<const Node> weights) = 0;
};

class FullPrecisionLinear final : public GroupLinear {
 public:
  std::vector<Node> apply(std::size_t group_index, const Node& x, std::span<const Node> weights) override;
};

struct LayerNodes {
  Node attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down, w;
};

/// Model weights lifted into the autodiff graph.
struct ModelNodes {
  Node embed, proj;
  std::vector<LayerNodes> layers;

  static ModelNodes constants(const LoopedModel& model);
  static ModelNodes trainable(const LoopedModel& model);
  /// Nodes in the same order as LoopedModel::tensors().
  std::vector<Node> all() const;
};

Node embed_tokens(const ModelNodes& nodes, const TokenBatch& batch);
Node output_logits(const ModelConfig& config, const ModelNodes& nodes, const Node& h);
/// Applies layer `layer` of the shared stack.
Node run_layer(const ModelConfig& config, const ModelNodes& nodes, std::size_t layer, const Node& h,
               std::size_t seq_len, GroupLinear& linear);

// --------------------------------------------------------------- model API

LoopedModel init_model(const ModelConfig& config, std::uint64_t seed);

/// Full-precision recurrence. With `record`, every H_{t,l} is kept; otherwise
/// only the final state and logits. `loops` overrides T when non-zero.
Trajectory forward(const LoopedModel& model, const TokenBatch& batch, bool record, std::size_t loops = 0);

/// One pass F through the shared stack. `seq_len` 0 treats h as one sequence.
Tensor loop_function(const LoopedModel& model, const Tensor& h, std::size_t seq_len = 0);

struct PretrainReport {
  std::vector<double> losses;
};

/// Next-token training of the full-precision model on the given batches.
PretrainReport pretrain(LoopedModel& model, std::span<const TokenBatch> batches, std::size_t steps, double lr);

}  // namespace loopq
