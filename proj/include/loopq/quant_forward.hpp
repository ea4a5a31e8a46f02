#pragma once

#include <compare>
#include <map>
#include <vector>

#include "loopq/autodiff.hpp"
#include "loopq/model.hpp"
#include "loopq/quant.hpp"

namespace loopq {

/// Per-transition adapters between consecutive loops:
///   A_t(H) = H + (a_t - 1) * rms(H) + b_t + ((rms(H) V) * eta_t) U^T
/// with rms() the gain-free RMS normalisation. Empty when the adapter is off.
struct TransitionAdapters {
  std::size_t rank = 0;
  double norm_eps = 1e-6;
  std::vector<Tensor> a, b, eta;  // per transition: 1 x d, 1 x d, 1 x rank
  Tensor u, v;                    // d x rank, shared

  /// Identity adapters for T-1 transitions; U and V ~ N(0, 1e-3^2).
  static TransitionAdapters identity(std::size_t d, std::size_t loops, std::size_t rank, std::uint64_t seed);

  bool enabled() const noexcept { return !a.empty(); }
  std::size_t transitions() const noexcept { return a.size(); }
  std::size_t parameter_count() const;
};

/// Applies A_t. t must be a valid transition index.
Tensor apply_cta(const TransitionAdapters& adapters, const Tensor& h, std::size_t t);

// --------------------------------------------------------------- binding

/// Parameter slot addressed by the optimizer and by gradient readers.
enum class Slot { transform_a, transform_b, scale, cta_a, cta_b, cta_eta, cta_u, cta_v };

struct SlotKey {
  Slot slot = Slot::scale;
  std::size_t group = 0;  // group index, unused for adapters
  std::size_t loop = 0;   // loop or transition index when `per_loop`
  bool per_loop = false;
  auto operator<=>(const SlotKey&) const = default;
};

struct TrainableMask {
  bool transforms = false;  // affine transforms only; fixed modes never train
  bool scales = false;
  bool adapters = false;
  /// Restricts transform training to the flagged groups; empty means all.
  std::vector<bool> transform_groups;

  bool trains_transform(std::size_t g) const noexcept {
    return transforms && (transform_groups.empty() || (g < transform_groups.size() && transform_groups[g]));
  }
};

struct QuantForwardOptions {
  TrainableMask train;
  /// Groups whose shared transform gets a separate leaf per loop, so the
  /// gradient contribution of every loop can be read on its own.
  std::vector<bool> split_groups;
  /// Loop count of the run; 0 uses the scheme's T. Loop-dependent entries
  /// beyond the calibrated range reuse the last one.
  std::size_t loops = 0;
};

/// Hands out graph nodes for scheme and adapter parameters, creating a
/// trainable leaf per slot when the mask asks for it.
class Binder {
 public:
  Binder(const QuantScheme& scheme, const TransitionAdapters& adapters, QuantForwardOptions options);

  struct BoundTransform {
    Node p;      // undefined for an identity transform
    Node inv_t;  // P^{-T}
  };
  /// Transform of group g at loop t.
  const BoundTransform& transform(std::size_t g, std::size_t t);
  Node scale(std::size_t g, std::size_t t);
  /// Adapter parameters of transition t.
  Node cta_a(std::size_t t);
  Node cta_b(std::size_t t);
  Node cta_eta(std::size_t t);
  Node cta_u();
  Node cta_v();

  const std::map<SlotKey, Node>& leaves() const noexcept { return leaves_; }
  const QuantScheme& scheme() const noexcept { return scheme_; }
  const TransitionAdapters& adapters() const noexcept { return adapters_; }
  std::size_t loops() const noexcept { return options_.loops ? options_.loops : scheme_.loops; }

 private:
  Node bind(const SlotKey& key, const Tensor& value, bool trainable);

  const QuantScheme& scheme_;
  const TransitionAdapters& adapters_;
  QuantForwardOptions options_;
  std::map<SlotKey, Node> leaves_;
  std::map<SlotKey, Node> nodes_;
  std::map<SlotKey, BoundTransform> transforms_;
};

/// Tensor a slot refers to inside the scheme or adapters.
Tensor& locate(QuantScheme& scheme, TransitionAdapters& adapters, const SlotKey& key);

/// Node-level adapter A_t.
Node apply_cta(Binder& binder, const Node& h, std::size_t t);

/// Quantized recurrence as graph nodes. states[t][0] is the (adapted) loop
/// input, states[t][l] the output of layer l; the last loop's output is final_state.
struct QuantTrajectory {
  std::vector<std::vector<Node>> states;
  Node final_state;
  Node logits;

  std::size_t loops() const noexcept { return states.size(); }
  const Node& loop_output(std::size_t t) const { return states.at(t).back(); }
  /// Plain-value copy for analysis code.
  Trajectory values() const;
};

/// Runs the model with every group executed as Q_a(X P; c) Q_w(W P^{-T})^T.
QuantTrajectory quantized_forward(const LoopedModel& model, const TokenBatch& batch, Binder& binder);

/// Convenience wrapper with constant parameters.
Trajectory quantized_forward(const LoopedModel& model, const QuantScheme& scheme, const TransitionAdapters& adapters,
                             const TokenBatch& batch, std::size_t loops = 0);

/// One quantized layer of the shared stack at loop t, on a plain state.
Tensor quantized_layer_forward(const LoopedModel& model, const QuantScheme& scheme, const Tensor& h, std::size_t t,
                               std::size_t layer, std::size_t seq_len = 0);

/// One quantized pass through the stack at loop t, without adapters.
Tensor quantized_loop_function(const LoopedModel& model, const QuantScheme& scheme, const Tensor& h, std::size_t t,
                               std::size_t seq_len = 0);

}  // namespace loopq
