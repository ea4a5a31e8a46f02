#pragma once

#include <cstdint>
#include <vector>

#include "loopq/model.hpp"
#include "loopq/quant.hpp"
#include "loopq/quant_forward.hpp"

namespace loopq {

/// Error of a quantized run against the full-precision run on the same batch.
/// Loop-level quantities use H_t = loop input (H_T = final state):
///   eps_t       = |H~_t - H_t|
///   eps_quant_t = |F~_t(H~_t) - F(H~_t)|, F~_t including the adapter A_t if present
///   gamma_t     = |F(H~_t) - F(H_t)| / eps_t  (0 when both are 0)
struct ErrorTrajectory {
  std::vector<std::vector<double>> rel_err;  // [t][l], l in [0, L]
  std::vector<double> eps;                   // T + 1 entries
  std::vector<double> eps_quant;             // T entries
  std::vector<double> gamma;                 // T entries

  std::size_t loops() const noexcept { return eps_quant.size(); }
  /// Mean relative error over the layers of the last loop.
  double final_loop_rel_err() const;
};

/// `loops` overrides T (0 keeps it); loop-dependent parameters past the
/// calibrated range reuse their last index.
ErrorTrajectory measure_error_trajectory(const LoopedModel& model, const QuantScheme& scheme,
                                         const TransitionAdapters& adapters, const TokenBatch& batch,
                                         std::size_t loops = 0);

struct Prop2Report {
  std::vector<double> lhs;  // eps_{t+1}
  std::vector<double> rhs;  // eps_quant_t + gamma_t eps_t
  double eps_final = 0;
  double unrolled_bound = 0;
  bool one_step_holds = true;
  bool unrolled_holds = true;
  double worst_slack = 0;  // min over t of rhs - lhs (negative means violated before tolerance)
};

inline constexpr double kProp2RelativeSlack = 1e-9;

/// Checks eps_{t+1} <= eps_quant_t + gamma_t eps_t at every t and
/// eps_T <= (prod gamma) eps_0 + sum_tau (prod_{t>tau} gamma_t) eps_quant_tau,
/// each to a relative slack of 1e-9. With `strict`, a violation throws VerificationFailure.
Prop2Report verify_prop2(const ErrorTrajectory& traj, bool strict = true);

// --------------------------------------------------------------- scale drift

struct Prop1ScaleSpec {
  double s1 = 1.0, s2 = 4.0;  // per-loop magnitudes of a standard Gaussian
  int bits = 4;
  std::size_t samples = 100000;
  std::size_t grid = 200;  // log-spaced clipping scales
  std::uint64_t seed = 1;
};

struct Prop1ScaleReport {
  double c_shared = 0;
  double c_opt[2] = {0, 0};
  double err_shared[2] = {0, 0};  // MSE per loop at the shared optimum
  double err_opt[2] = {0, 0};     // MSE per loop at its own optimum
  double margin = 0;              // max_t excess
  double std_error = 0;           // Monte-Carlo standard error of the margin
  std::size_t worst_loop = 0;
};

/// Grid search of per-loop and shared activation scales for two loops with the
/// same sample draws (common random numbers).
Prop1ScaleReport verify_prop1_scale(const Prop1ScaleSpec& spec);

// --------------------------------------------------------------- covariance drift

struct Prop1CovSpec {
  double lambda1 = 4.0, lambda2 = 0.25;  // eigenvalues shared by both loops
  double theta1_deg = 0.0, theta2_deg = 30.0;
  int bits = 4;
  std::size_t samples = 20000;
  std::size_t c_grid = 40;
  double angle_step_deg = 1.0;  // rotation grid over [0, 90)
  std::uint64_t seed = 2;
};

struct Prop1CovReport {
  double angle_shared = 0;
  double angle_opt[2] = {0, 0};
  double err_shared[2] = {0, 0};
  double err_opt[2] = {0, 0};
  double err_eigen[2] = {0, 0};  // each loop with its own eigenbasis transform
  double margin = 0;
  double std_error = 0;
};

/// 2-D transforms P(phi) = rotation by phi with a per-loop-optimal scale. The
/// shared transform/scale pair minimises the summed error of both loops.
Prop1CovReport verify_prop1_covariance(const Prop1CovSpec& spec);

// --------------------------------------------------------------- drift

struct DriftRow {
  std::size_t t = 0, layer = 0;
  double p99 = 0;
  double p99_normalized = 0;    // relative to loop 0 of the same layer
  double top_eig_cosine = 0;    // |v_t . v_0| of the leading covariance eigenvector
  std::vector<double> channel_energy;
};

struct DriftStats {
  std::vector<DriftRow> rows;  // t-major
};

DriftStats drift_stats(const LoopedModel& model, const TokenBatch& batch);

/// 99th percentile of |x| over all entries (nearest-rank).
double percentile_abs(const Tensor& x, double q);

}  // namespace loopq
