#pragma once

#include <optional>
#include <vector>

#include "loopq/autodiff.hpp"
#include "loopq/model.hpp"
#include "loopq/tensor.hpp"

namespace loopq {

/// Symmetric uniform quantizer settings. A bit width of 0 disables that
/// quantizer (pass-through), which the equivalence checks rely on.
struct QuantSpec {
  int bits_w = 4;
  int bits_a = 4;
  std::size_t group_size = 32;

  void validate() const;  // throws ConfigError
  /// Rejects a group size that does not divide every grouped dimension.
  void check_model(const ModelConfig& config) const;
};

double qmin_for(int bits);  // -2^(b-1)
double qmax_for(int bits);  //  2^(b-1) - 1

/// c * clip(round(x / c), qmin, qmax) with column groups of `group_size`
/// sharing one entry of the 1 x (cols/group_size) scale row `c`.
Tensor quantize_act(const Tensor& x, const Tensor& c, int bits, std::size_t group_size);
/// Differentiable version: straight-through w.r.t. x, and the usual
/// learned-step-size gradient w.r.t. c.
Node quantize_act(const Node& x, const Node& c, int bits, std::size_t group_size);

/// Round-to-nearest weight quantizer. Every row (output channel) is split into
/// groups of `group_size` inputs with scale max|w_group| / qmax (floored at 1e-12).
Tensor quantize_weight(const Tensor& w, int bits, std::size_t group_size);
/// Straight-through: forward is quantize_weight(w), gradient passes unchanged.
Node quantize_weight(const Node& w, int bits, std::size_t group_size);

inline constexpr double kWeightScaleFloor = 1e-12;
inline constexpr double kActScaleFloor = 1e-8;
inline constexpr double kMaxConditionNumber = 1e8;

// --------------------------------------------------------------- transforms

enum class TransformMode {
  identity,    // P = I, skipped at runtime
  orthogonal,  // fixed orthogonal matrix
  diagonal,    // fixed per-channel scaling
  affine,      // trainable invertible matrix, starts at I
};

const char* transform_mode_name(TransformMode mode);
TransformMode parse_transform_mode(const std::string& name);

/// Invertible pre-quantization transform P for one group. Stored either as a
/// full matrix (`a`) or as a Kronecker pair P = a (x) b.
struct TransformParam {
  TransformMode mode = TransformMode::identity;
  bool kronecker = false;
  Tensor a, b;

  static TransformParam identity(std::size_t d);
  static TransformParam full(TransformMode mode, Tensor p);
  /// Trainable transform initialised at the identity. With `kronecker`, the
  /// factor sizes are the most balanced divisor pair of d.
  static TransformParam affine(std::size_t d, bool kronecker = true);

  std::size_t dim() const;
  Tensor matrix() const;
  bool trainable() const noexcept { return mode == TransformMode::affine; }
  std::size_t parameter_count() const;
  /// Throws ParameterError if P is singular or its condition number exceeds 1e8.
  double check_invertible() const;
};

/// Most balanced factorisation d = da * db with da <= db.
std::pair<std::size_t, std::size_t> kronecker_factors(std::size_t d);

// --------------------------------------------------------------- scheme

/// Quantization state of one transform-weight group. Each of the transform
/// and the activation scale is either shared across loops or loop-dependent,
/// never both.
struct GroupScheme {
  GroupId id;
  std::size_t in_dim = 0;
  std::optional<TransformParam> shared;
  std::vector<TransformParam> per_loop;
  Tensor shared_scale;              // 1 x (in_dim / group_size)
  std::vector<Tensor> loop_scales;  // length T when loop-dependent

  bool transform_untied() const noexcept { return !per_loop.empty(); }
  bool scales_per_loop() const noexcept { return !loop_scales.empty(); }
  /// Loop indices past the calibrated range reuse the last one.
  const TransformParam& transform(std::size_t t) const;
  const Tensor& scale(std::size_t t) const;
};

struct QuantScheme {
  QuantSpec spec;
  std::size_t loops = 0;  // T the scheme was built for
  std::vector<GroupScheme> groups;

  /// Identity transforms and unit shared scales for every group.
  static QuantScheme make(const ModelConfig& config, const QuantSpec& spec);

  GroupScheme& group(const GroupId& id);
  const GroupScheme& group(const GroupId& id) const;
  std::size_t index_of(const GroupId& id) const;

  void validate(const ModelConfig& config) const;
  std::size_t transform_parameter_count() const;
  /// Transform parameters that exist only because a group was untied.
  std::size_t loop_dependent_transform_parameters() const;
  std::size_t scale_count() const;
};

/// Makes a group's transform loop-dependent, each copy starting from the
/// shared one. Activation scales of the group become loop-dependent as well;
/// existing per-loop scales are kept, otherwise the shared scale is copied.
void untie_group(GroupScheme& group, std::size_t loops);

// --------------------------------------------------------------- statistics

/// Inputs seen by every group at every loop of full-precision runs.
/// inputs[g][t] stacks the rows from all recorded batches.
struct ActivationRecord {
  std::vector<std::vector<Tensor>> inputs;
};

ActivationRecord record_group_inputs(const LoopedModel& model, std::span<const TokenBatch> batches);

enum class RangeRule { absmax, p999 };

/// Per-column-group range of (X P): absolute max, or the 99.9th percentile of |x|.
Tensor group_ranges(const Tensor& x, const TransformParam& p, std::size_t group_size, RangeRule rule);

/// Sets scales from recorded inputs: shared scales use the range over all
/// loops, loop-dependent scales the range of their own loop; scale = range / qmax.
void calibrate_static_scales(QuantScheme& scheme, const ActivationRecord& record,
                             RangeRule rule = RangeRule::absmax);

}  // namespace loopq
