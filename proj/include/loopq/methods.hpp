#pragma once

#include <string>
#include <vector>

#include "loopq/calibrate.hpp"
#include "loopq/quant.hpp"
#include "loopq/quant_forward.hpp"

namespace loopq {

// --------------------------------------------------------------- LAS

/// Replaces every shared activation scale with per-loop scales initialised
/// from each loop's own range. Groups that already have per-loop scales are
/// left alone. Returns the number of scale scalars added.
std::size_t enable_las(QuantScheme& scheme, const ActivationRecord& record, RangeRule rule = RangeRule::absmax);

// --------------------------------------------------------------- SLT

struct SharingGapReport {
  double eps = 1e-8;
  std::vector<std::size_t> groups;  // scored group indices
  std::vector<std::string> names;
  std::vector<double> scores;
  /// phi[i][t]: mean gradient (flattened) w.r.t. group i's transform as used in loop t.
  std::vector<std::vector<std::vector<double>>> phi;
  /// psi[i]: mean over batches of the squared total transform gradient.
  std::vector<std::vector<double>> psi;
};

/// sum_j [mean_t phi_tj^2 - (mean_t phi_tj)^2] / (psi_j + eps)
double sharing_gap(const std::vector<std::vector<double>>& phi, const std::vector<double>& psi, double eps);

/// Scores every group whose transform is still shared and trainable. Each
/// loop reads its own copy of the shared transform, so the copy gradients are
/// exactly the per-loop contributions; their sum is the shared gradient.
SharingGapReport sharing_gap_scores(const LoopedModel& model, const QuantScheme& scheme,
                                    const TransitionAdapters& adapters, const TeacherSet& teacher,
                                    const CalibLossConfig& cfg, std::span<const double> mu, double eps = 1e-8);

/// Scored groups ordered by descending score; ties by layer, then group name.
std::vector<std::size_t> rank_groups(const SharingGapReport& report, const QuantScheme& scheme);

struct SelectionConfig {
  std::size_t budget = 1;
  std::size_t rounds = 1;
  /// Calibration steps after each round's untying, before rescoring.
  std::size_t refine_steps = 20;
  OptimConfig refine;
};

struct SelectionResult {
  std::vector<std::size_t> selected;  // in selection order
  std::vector<SharingGapReport> rounds;
};

/// Progressive selection: each round unties the best ceil(remaining/rounds_left)
/// groups, briefly recalibrates, and rescores the rest. Modifies scheme and adapters.
SelectionResult select_loop_dependent(const LoopedModel& model, QuantScheme& scheme, TransitionAdapters& adapters,
                                      const TeacherSet& teacher, const CalibLossConfig& cfg,
                                      const SelectionConfig& sel);

/// Fraction of transform parameters that are loop-dependent additions.
double adapted_transform_fraction(const QuantScheme& scheme);

// --------------------------------------------------------------- baselines

enum class BaselineKind { symmetric, smooth_scale, rotation, learned_affine };

const char* baseline_name(BaselineKind kind);
BaselineKind parse_baseline(const std::string& name);

/// Diagonal transform P = diag(1/s) with s_j = max|x_j|^alpha / max|w_j|^(1-alpha),
/// x over all recorded loops and w over every weight of the group.
TransformParam smooth_transform(const Tensor& inputs, const std::vector<const Tensor*>& weights, double alpha = 0.5);

struct BaselineContext {
  const ActivationRecord* record = nullptr;
  std::uint64_t seed = 0;
  bool kronecker = true;
  RangeRule rule = RangeRule::absmax;
  // learned_affine only
  const TeacherSet* teacher = nullptr;
  CalibLossConfig loss;
  OptimConfig optim;
};

/// Builds the transforms of a static baseline and calibrates its shared
/// scales. learned_affine additionally optimises affine transforms and
/// shared scales on the trajectory loss, with no loop-dependent parameters.
QuantScheme apply_baseline(BaselineKind kind, const LoopedModel& model, const QuantSpec& spec,
                           const BaselineContext& ctx, CalibrationReport* report = nullptr);

}  // namespace loopq
