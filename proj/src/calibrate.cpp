#include "loopq/calibrate.hpp"

#include <chrono>
#include <cmath>

#include "loopq/errors.hpp"
#include "loopq/optim.hpp"

namespace loopq {

void CalibLossConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(kl_temperature > 0.0)) throw ConfigError("KL temperature must be positive");
  if (teacher_topk == 0) throw ConfigError("teacher top-k must be positive");
  if (mu_update_interval == 0) throw ConfigError("mu update interval must be >= 1");
  if (!(mu_eps >= 0.0)) throw ConfigError("mu epsilon must be non-negative");
}

double state_distance(const Tensor& a, const Tensor& b, bool mean_norms) {
  if (!a.same_shape(b)) throw ContractError("state shapes differ");
  const double s = squared_norm(sub(a, b));
  return mean_norms ? s / static_cast<double>(a.size()) : s;
}

namespace {

Node distance(const Node& a, const Tensor& target, bool mean_norms) {
  const Node d = mean_squared_error(a, Node::constant(target));
  return mean_norms ? d : scale(d, static_cast<double>(target.size()));
}

void check_pair(const Trajectory& fp, std::size_t q_loops, const Tensor& q_final) {
  if (fp.loops() != q_loops) throw ContractError("teacher and student loop counts differ");
  if (!fp.final_state.same_shape(q_final)) throw ContractError("teacher and student state shapes differ");
}

}  // namespace

LossTerms trajectory_loss(const Trajectory& fp, const QuantTrajectory& q, const CalibLossConfig& cfg,
                          std::span<const double> mu) {
  const std::size_t T = q.loops();
  check_pair(fp, T, q.final_state.value());
  if (cfg.adaptive_mu && mu.size() != T) throw ContractError("mu must have one weight per loop");

  LossTerms terms;
  terms.kl = kl_divergence(fp.logits, q.logits, cfg.kl_temperature, cfg.teacher_topk);
  Node hidden = Node::constant(Tensor::scalar(0.0));
  Node final_target = hidden;
  Node transition = hidden;
  for (std::size_t t = 0; t < T; ++t) {
    const Node& out = q.loop_output(t);
    const double w = cfg.adaptive_mu ? mu[t] : 1.0;
    const double wh = cfg.adaptive_mu ? 1.0 - mu[t] : 1.0;
    hidden = add(hidden, scale(distance(out, fp.loop_output(t), cfg.mean_norms), wh));
    final_target = add(final_target, scale(distance(out, fp.final_state, cfg.mean_norms), w));
    if (t + 1 < T) transition = add(transition, distance(q.states[t + 1][0], fp.states[t + 1][0], cfg.mean_norms));
  }
  terms.hidden = hidden;
  terms.final_target = final_target;
  terms.transition = transition;
  terms.total = add(terms.kl, scale(add(add(hidden, final_target), transition), cfg.lambda));
  return terms;
}

std::vector<double> compute_mu(std::span<const Trajectory> fp, std::span<const Trajectory> q, double eps,
                               bool mean_norms) {
  if (fp.size() != q.size() || fp.empty()) throw ContractError("compute_mu needs matching, non-empty trajectory sets");
  const std::size_t T = fp[0].loops();
  std::vector<double> num(T, 0.0), mismatch(T, 0.0);
  for (std::size_t i = 0; i < fp.size(); ++i) {
    check_pair(fp[i], q[i].loops(), q[i].final_state);
    for (std::size_t t = 0; t < T; ++t) {
      num[t] += state_distance(fp[i].final_state, fp[i].loop_output(t), mean_norms);
      mismatch[t] += state_distance(fp[i].loop_output(t), q[i].loop_output(t), mean_norms);
    }
  }
  std::vector<double> mu(T);
  double tail = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    tail += mismatch[t];
    const double den = num[t] + tail + eps;
    mu[t] = den > 0.0 ? num[t] / den : 0.0;
  }
  return mu;
}

std::vector<double> compute_mu(const Trajectory& fp, const Trajectory& q, double eps, bool mean_norms) {
  return compute_mu(std::span<const Trajectory>(&fp, 1), std::span<const Trajectory>(&q, 1), eps, mean_norms);
}

TeacherSet make_teacher(const LoopedModel& model, std::vector<TokenBatch> batches) {
  if (batches.empty()) throw ContractError("calibration needs at least one batch");
  TeacherSet set;
  for (const TokenBatch& b : batches) set.fp.push_back(forward(model, b, true));
  set.batches = std::move(batches);
  return set;
}

namespace {

LossBreakdown breakdown(const LossTerms& t) {
  return {t.total.value().item(), t.kl.value().item(), t.hidden.value().item(), t.final_target.value().item(),
          t.transition.value().item()};
}

double learning_rate(const OptimConfig& opt, Slot slot) {
  switch (slot) {
    case Slot::scale: return opt.lr_scale;
    case Slot::transform_a:
    case Slot::transform_b: return opt.lr_transform;
    default: return opt.lr_adapter;
  }
}

std::vector<double> uniform_mu(std::size_t loops) { return std::vector<double>(loops, 0.0); }

}  // namespace

LossBreakdown evaluate_loss(const LoopedModel& model, const QuantScheme& scheme, const TransitionAdapters& adapters,
                            const TeacherSet& teacher, const CalibLossConfig& cfg, std::span<const double> mu) {
  LossBreakdown sum;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    Binder binder(scheme, adapters, {});
    const QuantTrajectory q = quantized_forward(model, teacher.batches[i], binder);
    const LossBreakdown b = breakdown(trajectory_loss(teacher.fp[i], q, cfg, mu));
    sum.total += b.total;
    sum.kl += b.kl;
    sum.hidden += b.hidden;
    sum.final_target += b.final_target;
    sum.transition += b.transition;
  }
  const double n = static_cast<double>(teacher.size());
  return {sum.total / n, sum.kl / n, sum.hidden / n, sum.final_target / n, sum.transition / n};
}

std::vector<double> current_mu(const LoopedModel& model, const QuantScheme& scheme,
                               const TransitionAdapters& adapters, const TeacherSet& teacher,
                               const CalibLossConfig& cfg) {
  if (!cfg.adaptive_mu) return uniform_mu(scheme.loops);
  std::vector<Trajectory> q;
  q.reserve(teacher.size());
  for (const TokenBatch& b : teacher.batches) q.push_back(quantized_forward(model, scheme, adapters, b));
  return compute_mu(teacher.fp, q, cfg.mu_eps, cfg.mean_norms);
}

CalibrationReport run_calibration(const LoopedModel& model, QuantScheme& scheme, TransitionAdapters& adapters,
                                  const TeacherSet& teacher, const CalibLossConfig& cfg, const OptimConfig& opt) {
  cfg.validate();
  if (teacher.size() == 0) throw ContractError("calibration needs at least one batch");
  const auto start = std::chrono::steady_clock::now();
  CalibrationReport report;
  report.initial_mu = current_mu(model, scheme, adapters, teacher, cfg);
  report.initial = evaluate_loss(model, scheme, adapters, teacher, cfg, report.initial_mu);

  std::vector<double> mu = report.initial_mu;
  std::map<SlotKey, AdamSlot> adam;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    if (step > 0 && step % cfg.mu_update_interval == 0) mu = current_mu(model, scheme, adapters, teacher, cfg);
    const std::size_t bi = step % teacher.size();
    Binder binder(scheme, adapters, {opt.train, {}, 0});
    const QuantTrajectory q = quantized_forward(model, teacher.batches[bi], binder);
    const LossTerms terms = trajectory_loss(teacher.fp[bi], q, cfg, mu);
    CalibrationStep rec{step, breakdown(terms), 0.0, 0.0};
    if (!std::isfinite(rec.loss.total)) {
      const std::string last = report.steps.empty() ? std::string("none") : std::to_string(report.steps.back().step);
      throw NumericError("calibration loss became non-finite at step " + std::to_string(step) +
                         "; last finite step " + last);
    }
    const auto& leaves = binder.leaves();
    if (!leaves.empty()) {
      backward(terms.total);
      std::vector<SlotKey> keys;
      std::vector<Tensor> grads;
      for (const auto& [key, node] : leaves) {
        keys.push_back(key);
        grads.push_back(node.grad());
      }
      rec.grad_norm = clip_grad_norm(grads, opt.clip_norm);
      for (std::size_t i = 0; i < keys.size(); ++i) {
        const double lr = cosine_lr(learning_rate(opt, keys[i].slot), step, opt.steps);
        Tensor& target = locate(scheme, adapters, keys[i]);
        adam[keys[i]].update(target, grads[i], lr);
        if (keys[i].slot == Slot::scale)
          for (double& v : target.data()) v = std::max(v, kActScaleFloor);
      }
      rec.lr_scale = cosine_lr(opt.lr_scale, step, opt.steps);
    }
    report.steps.push_back(rec);
  }

  for (const auto& g : scheme.groups) {
    if (g.transform_untied())
      for (const auto& p : g.per_loop) p.check_invertible();
    else
      g.shared->check_invertible();
  }
  report.final_mu = current_mu(model, scheme, adapters, teacher, cfg);
  report.final = evaluate_loss(model, scheme, adapters, teacher, cfg, report.initial_mu);

  double tn = 0, sn = 0;
  for (const auto& g : scheme.groups) {
    for (std::size_t t = 0; t < (g.transform_untied() ? g.per_loop.size() : 1); ++t) {
      const TransformParam& p = g.transform(t);
      tn += squared_norm(p.a) + (p.b.empty() ? 0.0 : squared_norm(p.b));
    }
    if (g.scales_per_loop())
      for (const Tensor& c : g.loop_scales) sn += squared_norm(c);
    else
      sn += squared_norm(g.shared_scale);
  }
  report.parameter_norms["transforms"] = std::sqrt(tn);
  report.parameter_norms["scales"] = std::sqrt(sn);
  if (adapters.enabled()) {
    double an = squared_norm(adapters.u) + squared_norm(adapters.v);
    for (std::size_t t = 0; t < adapters.transitions(); ++t)
      an += squared_norm(adapters.a[t]) + squared_norm(adapters.b[t]) + squared_norm(adapters.eta[t]);
    report.parameter_norms["adapters"] = std::sqrt(an);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::map<SlotKey, Tensor> estimate_fisher(const LoopedModel& model, const QuantScheme& scheme,
                                          const TransitionAdapters& adapters, const TeacherSet& teacher,
                                          const CalibLossConfig& cfg, std::span<const double> mu,
                                          const TrainableMask& mask) {
  if (teacher.size() == 0) throw ContractError("Fisher estimate needs at least one batch");
  std::map<SlotKey, Tensor> psi;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    Binder binder(scheme, adapters, {mask, {}, 0});
    const QuantTrajectory q = quantized_forward(model, teacher.batches[i], binder);
    const LossTerms terms = trajectory_loss(teacher.fp[i], q, cfg, mu);
    if (binder.leaves().empty()) continue;
    backward(terms.total);
    for (const auto& [key, node] : binder.leaves()) {
      const Tensor g = node.grad();
      Tensor& acc = psi[key];
      if (acc.empty()) acc = Tensor(g.shape());
      for (std::size_t k = 0; k < g.size(); ++k) acc[k] += g[k] * g[k];
    }
  }
  const double n = static_cast<double>(teacher.size());
  for (auto& [key, acc] : psi)
    for (double& v : acc.data()) v /= n;
  return psi;
}

}  // namespace loopq
