#pragma once

#include <map>
#include <string>
#include <vector>

#include "loopq/model.hpp"
#include "loopq/quant_forward.hpp"

namespace loopq {

struct CalibLossConfig {
  double lambda = 0.1;
  double kl_temperature = 1.0;
  std::size_t teacher_topk = 1000;  // clipped to the vocabulary
  std::size_t mu_update_interval = 100;
  double mu_eps = 1e-8;
  /// Adaptive per-loop trust weights; false gives the fixed equal weighting.
  bool adaptive_mu = true;
  /// Squared norms as means over tokens and features; false uses raw sums.
  bool mean_norms = true;

  void validate() const;
};

struct LossTerms {
  Node total, kl, hidden, final_target, transition;
};

/// KL(Z || Z~) + lambda * (sum_t [(1-mu_t)|H~_tL - H_tL|^2 + mu_t |H~_tL - H_T|^2]
///                         + sum_{t<T-1} |A_t(H~_tL) - H_{t+1,0}|^2).
/// The adapted state A_t(H~_tL) is read from q.states[t+1][0]. In fixed mode
/// both hidden terms have weight 1 and `mu` is ignored.
LossTerms trajectory_loss(const Trajectory& fp, const QuantTrajectory& q, const CalibLossConfig& cfg,
                          std::span<const double> mu);

/// Squared distance used by the loss (mean or sum per `mean_norms`).
double state_distance(const Tensor& a, const Tensor& b, bool mean_norms);

/// mu_t = |H_T - H_tL|^2 / (|H_T - H_tL|^2 + sum_{t'>=t} |H_t'L - H~_t'L|^2 + eps),
/// with each squared norm summed over the given trajectory pairs.
std::vector<double> compute_mu(std::span<const Trajectory> fp, std::span<const Trajectory> q, double eps,
                               bool mean_norms = true);
std::vector<double> compute_mu(const Trajectory& fp, const Trajectory& q, double eps, bool mean_norms = true);

/// Calibration batches with their cached full-precision teacher trajectories.
struct TeacherSet {
  std::vector<TokenBatch> batches;
  std::vector<Trajectory> fp;

  std::size_t size() const noexcept { return batches.size(); }
};

TeacherSet make_teacher(const LoopedModel& model, std::vector<TokenBatch> batches);

struct OptimConfig {
  std::size_t steps = 200;
  double lr_scale = 5e-3;
  double lr_transform = 1e-3;
  double lr_adapter = 1e-3;
  double clip_norm = 1.0;
  TrainableMask train{true, true, true, {}};
};

struct LossBreakdown {
  double total = 0, kl = 0, hidden = 0, final_target = 0, transition = 0;
};

struct CalibrationStep {
  std::size_t step = 0;
  LossBreakdown loss;
  double grad_norm = 0;
  double lr_scale = 0;
};

struct CalibrationReport {
  std::vector<CalibrationStep> steps;
  /// Full-calibration-set loss before and after, both with the initial mu.
  LossBreakdown initial, final;
  std::vector<double> initial_mu, final_mu;
  std::map<std::string, double> parameter_norms;
  double wall_seconds = 0;
};

/// Mean loss over the whole teacher set under constant parameters.
LossBreakdown evaluate_loss(const LoopedModel& model, const QuantScheme& scheme, const TransitionAdapters& adapters,
                            const TeacherSet& teacher, const CalibLossConfig& cfg, std::span<const double> mu);

/// mu over the whole teacher set for the current parameters.
std::vector<double> current_mu(const LoopedModel& model, const QuantScheme& scheme,
                               const TransitionAdapters& adapters, const TeacherSet& teacher,
                               const CalibLossConfig& cfg);

/// Adam over every trainable slot with per-kind learning rates, cosine decay,
/// global gradient clipping, positive-scale clamping and periodic mu refresh.
/// Steps cycle through the teacher batches in order.
CalibrationReport run_calibration(const LoopedModel& model, QuantScheme& scheme, TransitionAdapters& adapters,
                                  const TeacherSet& teacher, const CalibLossConfig& cfg, const OptimConfig& opt);

/// Mean over batches of the squared loss gradient for every trainable slot.
std::map<SlotKey, Tensor> estimate_fisher(const LoopedModel& model, const QuantScheme& scheme,
                                          const TransitionAdapters& adapters, const TeacherSet& teacher,
                                          const CalibLossConfig& cfg, std::span<const double> mu,
                                          const TrainableMask& mask);

}  // namespace loopq
