#include "loopq/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "loopq/errors.hpp"
#include "loopq/linalg.hpp"

namespace loopq {

double ErrorTrajectory::final_loop_rel_err() const {
  if (rel_err.empty()) return 0.0;
  const auto& last = rel_err.back();
  if (last.size() < 2) return 0.0;
  double s = 0.0;
  for (std::size_t l = 1; l < last.size(); ++l) s += last[l];
  return s / static_cast<double>(last.size() - 1);
}

namespace {

double distance(const Tensor& a, const Tensor& b) { return frobenius_norm(sub(a, b)); }

double relative(const Tensor& q, const Tensor& ref) {
  const double den = frobenius_norm(ref);
  const double num = distance(q, ref);
  return den > 0.0 ? num / den : 0.0;
}

}  // namespace

ErrorTrajectory measure_error_trajectory(const LoopedModel& model, const QuantScheme& scheme,
                                         const TransitionAdapters& adapters, const TokenBatch& batch,
                                         std::size_t loops) {
  const Trajectory fp = forward(model, batch, true, loops);
  const Trajectory q = quantized_forward(model, scheme, adapters, batch, loops);
  const std::size_t T = fp.loops();
  ErrorTrajectory out;
  out.rel_err.resize(T);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t l = 0; l < fp.states[t].size(); ++l)
      out.rel_err[t].push_back(relative(q.states[t][l], fp.states[t][l]));
  for (std::size_t t = 0; t <= T; ++t) out.eps.push_back(distance(q.loop_input(t), fp.loop_input(t)));
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor f_q = loop_function(model, q.loop_input(t), batch.seq_len);
    const Tensor f_fp = loop_function(model, fp.loop_input(t), batch.seq_len);
    out.eps_quant.push_back(distance(q.loop_input(t + 1), f_q));
    const double num = distance(f_q, f_fp);
    out.gamma.push_back(out.eps[t] > 0.0 ? num / out.eps[t] : 0.0);
  }
  return out;
}

Prop2Report verify_prop2(const ErrorTrajectory& traj, bool strict) {
  const std::size_t T = traj.loops();
  if (traj.eps.size() != T + 1 || traj.gamma.size() != T) throw ContractError("malformed error trajectory");
  Prop2Report rep;
  rep.worst_slack = std::numeric_limits<double>::infinity();
  auto within = [](double lhs, double rhs) { return lhs <= rhs * (1.0 + kProp2RelativeSlack) + 1e-15; };
  for (std::size_t t = 0; t < T; ++t) {
    const double lhs = traj.eps[t + 1];
    const double rhs = traj.eps_quant[t] + traj.gamma[t] * traj.eps[t];
    rep.lhs.push_back(lhs);
    rep.rhs.push_back(rhs);
    rep.worst_slack = std::min(rep.worst_slack, rhs - lhs);
    if (!within(lhs, rhs)) rep.one_step_holds = false;
  }
  double bound = traj.eps.empty() ? 0.0 : traj.eps[0];
  for (std::size_t t = 0; t < T; ++t) bound = traj.gamma[t] * bound + traj.eps_quant[t];
  rep.unrolled_bound = bound;
  rep.eps_final = traj.eps.back();
  rep.unrolled_holds = within(rep.eps_final, bound);
  if (T == 0) rep.worst_slack = 0.0;
  if (strict && (!rep.one_step_holds || !rep.unrolled_holds))
    throw VerificationFailure("error recursion bound violated (worst slack " + std::to_string(rep.worst_slack) + ")");
  return rep;
}

// --------------------------------------------------------------- scale drift

namespace {

double quant_err2(double x, double c, double lo, double hi) {
  const double q = c * std::clamp(std::nearbyint(x / c), lo, hi);
  return (q - x) * (q - x);
}

std::vector<double> log_grid(double lo, double hi, std::size_t n) {
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = n == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
  return g;
}

double std_error_of_difference(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m += a[i] - b[i];
  m /= n;
  double v = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) v += (a[i] - b[i] - m) * (a[i] - b[i] - m);
  v /= std::max(n - 1.0, 1.0);
  return std::sqrt(v / n);
}

}  // namespace

Prop1ScaleReport verify_prop1_scale(const Prop1ScaleSpec& spec) {
  if (!(spec.s1 > 0.0) || !(spec.s2 > 0.0)) throw ContractError("loop magnitudes must be positive");
  if (spec.samples < 2 || spec.grid < 2) throw ContractError("need at least two samples and grid points");
  if (spec.bits < 2) throw ContractError("bits must be >= 2");
  const double lo = qmin_for(spec.bits), hi = qmax_for(spec.bits);
  Rng rng(spec.seed);
  std::vector<double> r(spec.samples);
  for (double& v : r) v = rng.normal();

  const double s[2] = {spec.s1, spec.s2};
  const auto grid = log_grid(0.02 * std::min(s[0], s[1]), 2.0 * std::max(s[0], s[1]), spec.grid);
  std::vector<double> err[2];
  for (int t = 0; t < 2; ++t) {
    err[t].resize(grid.size());
    for (std::size_t k = 0; k < grid.size(); ++k) {
      double acc = 0.0;
      for (double v : r) acc += quant_err2(s[t] * v, grid[k], lo, hi);
      err[t][k] = acc / static_cast<double>(r.size());
    }
  }
  std::size_t best[2], shared = 0;
  for (int t = 0; t < 2; ++t)
    best[t] = static_cast<std::size_t>(std::min_element(err[t].begin(), err[t].end()) - err[t].begin());
  for (std::size_t k = 1; k < grid.size(); ++k)
    if (err[0][k] + err[1][k] < err[0][shared] + err[1][shared]) shared = k;

  Prop1ScaleReport rep;
  rep.c_shared = grid[shared];
  double excess[2];
  for (int t = 0; t < 2; ++t) {
    rep.c_opt[t] = grid[best[t]];
    rep.err_shared[t] = err[t][shared];
    rep.err_opt[t] = err[t][best[t]];
    excess[t] = rep.err_shared[t] - rep.err_opt[t];
  }
  rep.worst_loop = excess[1] > excess[0] ? 1 : 0;
  rep.margin = excess[rep.worst_loop];
  const int w = static_cast<int>(rep.worst_loop);
  std::vector<double> a(r.size()), b(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    a[i] = quant_err2(s[w] * r[i], rep.c_shared, lo, hi);
    b[i] = quant_err2(s[w] * r[i], rep.c_opt[w], lo, hi);
  }
  rep.std_error = std_error_of_difference(a, b);
  return rep;
}

// --------------------------------------------------------------- covariance drift

Prop1CovReport verify_prop1_covariance(const Prop1CovSpec& spec) {
  if (!(spec.lambda1 > 0.0) || !(spec.lambda2 > 0.0)) throw ContractError("covariance eigenvalues must be positive");
  if (spec.samples < 2 || spec.c_grid < 2 || !(spec.angle_step_deg > 0.0)) throw ContractError("bad grid");
  const double lo = qmin_for(spec.bits), hi = qmax_for(spec.bits);
  const double deg = std::numbers::pi / 180.0;
  Rng rng(spec.seed);
  const std::size_t n = spec.samples;
  std::vector<double> z1(n), z2(n);
  for (std::size_t i = 0; i < n; ++i) {
    z1[i] = rng.normal() * std::sqrt(spec.lambda1);
    z2[i] = rng.normal() * std::sqrt(spec.lambda2);
  }
  // loop t sample: eigen-coordinates (z1, z2) rotated by theta_t; the transform
  // then rotates by -phi, so only the relative angle theta_t - phi matters.
  const double theta[2] = {spec.theta1_deg * deg, spec.theta2_deg * deg};
  std::vector<double> angles;
  for (double a = 0.0; a < 90.0 - 1e-9; a += spec.angle_step_deg) angles.push_back(a);
  const double sd = std::sqrt(std::max(spec.lambda1, spec.lambda2));
  const auto cgrid = log_grid(0.02 * std::sqrt(std::min(spec.lambda1, spec.lambda2)), 2.0 * sd, spec.c_grid);

  auto sample_err = [&](int t, double phi, double c, std::size_t i) {
    const double rel = theta[t] - phi;
    const double x = z1[i] * std::cos(rel) - z2[i] * std::sin(rel);
    const double y = z1[i] * std::sin(rel) + z2[i] * std::cos(rel);
    return quant_err2(x, c, lo, hi) + quant_err2(y, c, lo, hi);
  };
  auto mean_err = [&](int t, double phi, double c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += sample_err(t, phi, c, i);
    return acc / static_cast<double>(n);
  };

  // err[t][a][k]
  std::vector<std::vector<std::vector<double>>> err(2, std::vector<std::vector<double>>(angles.size()));
  std::vector<double> xs(n), ys(n);
  for (int t = 0; t < 2; ++t) {
    for (std::size_t a = 0; a < angles.size(); ++a) {
      const double rel = theta[t] - angles[a] * deg;
      const double cr = std::cos(rel), sr = std::sin(rel);
      for (std::size_t i = 0; i < n; ++i) {
        xs[i] = z1[i] * cr - z2[i] * sr;
        ys[i] = z1[i] * sr + z2[i] * cr;
      }
      for (double c : cgrid) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += quant_err2(xs[i], c, lo, hi) + quant_err2(ys[i], c, lo, hi);
        err[t][a].push_back(acc / static_cast<double>(n));
      }
    }
  }

  Prop1CovReport rep;
  std::size_t best_a[2] = {0, 0}, best_k[2] = {0, 0}, sa = 0, sk = 0;
  for (std::size_t a = 0; a < angles.size(); ++a) {
    for (std::size_t k = 0; k < cgrid.size(); ++k) {
      for (int t = 0; t < 2; ++t)
        if (err[t][a][k] < err[t][best_a[t]][best_k[t]]) {
          best_a[t] = a;
          best_k[t] = k;
        }
      if (err[0][a][k] + err[1][a][k] < err[0][sa][sk] + err[1][sa][sk]) {
        sa = a;
        sk = k;
      }
    }
  }
  rep.angle_shared = angles[sa];
  double excess[2];
  for (int t = 0; t < 2; ++t) {
    rep.angle_opt[t] = angles[best_a[t]];
    rep.err_opt[t] = err[t][best_a[t]][best_k[t]];
    rep.err_shared[t] = err[t][sa][sk];
    excess[t] = rep.err_shared[t] - rep.err_opt[t];
    double e = std::numeric_limits<double>::infinity();
    for (double c : cgrid) e = std::min(e, mean_err(t, theta[t], c));
    rep.err_eigen[t] = e;
  }
  const int w = excess[1] > excess[0] ? 1 : 0;
  rep.margin = excess[w];
  std::vector<double> x(n), y(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = sample_err(w, angles[sa] * deg, cgrid[sk], i);
    y[i] = sample_err(w, angles[best_a[w]] * deg, cgrid[best_k[w]], i);
  }
  rep.std_error = std_error_of_difference(x, y);
  return rep;
}

// --------------------------------------------------------------- drift

double percentile_abs(const Tensor& x, double q) {
  if (x.empty()) return 0.0;
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) v[i] = std::abs(x[i]);
  const auto n = static_cast<double>(v.size());
  std::size_t rank = static_cast<std::size_t>(std::ceil(q * n));
  rank = std::clamp<std::size_t>(rank, 1, v.size()) - 1;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(rank), v.end());
  return v[rank];
}

namespace {

std::vector<double> leading_direction(const Tensor& h) {
  const std::size_t n = h.rows(), d = h.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) mean[j] += h(r, j) / static_cast<double>(n);
  Tensor cov = Tensor::zeros(d, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov(i, j) += (h(r, i) - mean[i]) * (h(r, j) - mean[j]);
  Tensor vals, vecs;
  symmetric_eigen(cov, vals, vecs);
  std::vector<double> v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = vecs(i, d - 1);
  return v;
}

}  // namespace

DriftStats drift_stats(const LoopedModel& model, const TokenBatch& batch) {
  const Trajectory fp = forward(model, batch, true);
  DriftStats out;
  const std::size_t T = fp.loops();
  const std::size_t L1 = T ? fp.states[0].size() : 0;
  std::vector<double> base_p99(L1, 0.0);
  std::vector<std::vector<double>> base_dir(L1);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t l = 0; l < L1; ++l) {
      const Tensor& h = fp.states[t][l];
      DriftRow row;
      row.t = t;
      row.layer = l;
      row.p99 = percentile_abs(h, 0.99);
      const auto dir = leading_direction(h);
      if (t == 0) {
        base_p99[l] = row.p99;
        base_dir[l] = dir;
      }
      row.p99_normalized = base_p99[l] > 0.0 ? row.p99 / base_p99[l] : 0.0;
      double dot = 0.0;
      for (std::size_t j = 0; j < dir.size(); ++j) dot += dir[j] * base_dir[l][j];
      row.top_eig_cosine = std::abs(dot);
      row.channel_energy.assign(h.cols(), 0.0);
      for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t j = 0; j < h.cols(); ++j)
          row.channel_energy[j] += h(r, j) * h(r, j) / static_cast<double>(h.rows());
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

}  // namespace loopq
