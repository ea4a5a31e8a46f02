#include "loopq/methods.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "loopq/errors.hpp"
#include "loopq/linalg.hpp"

namespace loopq {

std::size_t enable_las(QuantScheme& scheme, const ActivationRecord& record, RangeRule rule) {
  if (record.inputs.size() != scheme.groups.size()) throw ContractError("activation record does not match the scheme");
  const std::size_t gs = scheme.spec.group_size;
  const double qmax = scheme.spec.bits_a > 0 ? qmax_for(scheme.spec.bits_a) : 1.0;
  std::size_t added = 0;
  for (std::size_t g = 0; g < scheme.groups.size(); ++g) {
    GroupScheme& group = scheme.groups[g];
    if (group.scales_per_loop()) continue;
    const auto& inputs = record.inputs[g];
    if (inputs.empty() || inputs[0].empty()) throw ContractError("activation record is empty");
    added += (scheme.loops - 1) * group.shared_scale.size();
    group.loop_scales.clear();
    for (std::size_t t = 0; t < scheme.loops; ++t) {
      Tensor c = group_ranges(inputs[std::min(t, inputs.size() - 1)], group.transform(t), gs, rule);
      for (double& v : c.data()) v = std::max(v / qmax, kActScaleFloor);
      group.loop_scales.push_back(std::move(c));
    }
    group.shared_scale = Tensor();
  }
  return added;
}

double sharing_gap(const std::vector<std::vector<double>>& phi, const std::vector<double>& psi, double eps) {
  if (phi.empty()) throw ContractError("sharing_gap needs at least one loop");
  const std::size_t n = psi.size();
  const double T = static_cast<double>(phi.size());
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double m1 = 0.0, m2 = 0.0;
    for (const auto& row : phi) {
      if (row.size() != n) throw DimensionError("sharing_gap: gradient length mismatch");
      m1 += row[j];
      m2 += row[j] * row[j];
    }
    m1 /= T;
    m2 /= T;
    s += std::max(m2 - m1 * m1, 0.0) / (psi[j] + eps);
  }
  return s;
}

SharingGapReport sharing_gap_scores(const LoopedModel& model, const QuantScheme& scheme,
                                    const TransitionAdapters& adapters, const TeacherSet& teacher,
                                    const CalibLossConfig& cfg, std::span<const double> mu, double eps) {
  if (teacher.size() == 0) throw ContractError("sharing-gap scores need at least one calibration batch");
  SharingGapReport rep;
  rep.eps = eps;
  std::vector<bool> split(scheme.groups.size(), false);
  for (std::size_t g = 0; g < scheme.groups.size(); ++g) {
    const GroupScheme& gs = scheme.groups[g];
    if (gs.transform_untied() || !gs.shared->trainable()) continue;
    split[g] = true;
    rep.groups.push_back(g);
    rep.names.push_back(gs.id.name());
  }
  if (rep.groups.empty()) throw ContractError("no shared trainable transform to score");

  const std::size_t T = scheme.loops;
  const std::size_t G = rep.groups.size();
  rep.phi.assign(G, std::vector<std::vector<double>>(T));
  rep.psi.assign(G, {});
  for (std::size_t bi = 0; bi < teacher.size(); ++bi) {
    Binder binder(scheme, adapters, {TrainableMask{}, split, 0});
    const QuantTrajectory q = quantized_forward(model, teacher.batches[bi], binder);
    backward(trajectory_loss(teacher.fp[bi], q, cfg, mu).total);
    const auto& leaves = binder.leaves();
    for (std::size_t i = 0; i < G; ++i) {
      std::vector<double> total;
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> flat;
        for (Slot s : {Slot::transform_a, Slot::transform_b}) {
          const auto it = leaves.find({s, rep.groups[i], t, true});
          if (it == leaves.end()) continue;
          const Tensor g = it->second.grad();
          flat.insert(flat.end(), g.data().begin(), g.data().end());
        }
        auto& acc = rep.phi[i][t];
        if (acc.empty()) acc.assign(flat.size(), 0.0);
        if (total.empty()) total.assign(flat.size(), 0.0);
        for (std::size_t j = 0; j < flat.size(); ++j) {
          acc[j] += flat[j];
          total[j] += flat[j];
        }
      }
      auto& psi = rep.psi[i];
      if (psi.empty()) psi.assign(total.size(), 0.0);
      for (std::size_t j = 0; j < total.size(); ++j) psi[j] += total[j] * total[j];
    }
  }
  const double nb = static_cast<double>(teacher.size());
  for (std::size_t i = 0; i < G; ++i) {
    for (auto& row : rep.phi[i])
      for (double& v : row) v /= nb;
    for (double& v : rep.psi[i]) v /= nb;
    rep.scores.push_back(sharing_gap(rep.phi[i], rep.psi[i], eps));
  }
  return rep;
}

std::vector<std::size_t> rank_groups(const SharingGapReport& report, const QuantScheme& scheme) {
  std::vector<std::size_t> order(report.groups.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    if (report.scores[x] != report.scores[y]) return report.scores[x] > report.scores[y];
    const GroupId& a = scheme.groups[report.groups[x]].id;
    const GroupId& b = scheme.groups[report.groups[y]].id;
    if (a.layer != b.layer) return a.layer < b.layer;
    return group_kind_name(a.kind) < group_kind_name(b.kind);
  });
  std::vector<std::size_t> out;
  for (std::size_t i : order) out.push_back(report.groups[i]);
  return out;
}

SelectionResult select_loop_dependent(const LoopedModel& model, QuantScheme& scheme, TransitionAdapters& adapters,
                                      const TeacherSet& teacher, const CalibLossConfig& cfg,
                                      const SelectionConfig& sel) {
  if (sel.budget > scheme.groups.size())
    throw ContractError("selection budget " + std::to_string(sel.budget) + " exceeds the " +
                        std::to_string(scheme.groups.size()) + " groups");
  SelectionResult result;
  std::size_t remaining = sel.budget;
  std::size_t rounds_left = std::max<std::size_t>(sel.rounds, 1);
  while (remaining > 0) {
    const std::vector<double> mu = current_mu(model, scheme, adapters, teacher, cfg);
    SharingGapReport rep = sharing_gap_scores(model, scheme, adapters, teacher, cfg, mu);
    const std::vector<std::size_t> order = rank_groups(rep, scheme);
    const std::size_t take = rounds_left > 1 ? (remaining + rounds_left - 1) / rounds_left : remaining;
    if (take > order.size()) throw ContractError("not enough shared trainable groups to meet the selection budget");
    for (std::size_t k = 0; k < take; ++k) {
      untie_group(scheme.groups[order[k]], scheme.loops);
      result.selected.push_back(order[k]);
    }
    result.rounds.push_back(std::move(rep));
    remaining -= take;
    if (rounds_left > 1) --rounds_left;
    if (remaining > 0 && sel.refine_steps > 0) {
      OptimConfig opt = sel.refine;
      opt.steps = sel.refine_steps;
      run_calibration(model, scheme, adapters, teacher, cfg, opt);
    }
  }
  return result;
}

double adapted_transform_fraction(const QuantScheme& scheme) {
  const std::size_t total = scheme.transform_parameter_count();
  return total ? static_cast<double>(scheme.loop_dependent_transform_parameters()) / static_cast<double>(total) : 0.0;
}

// --------------------------------------------------------------- baselines

const char* baseline_name(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::symmetric: return "symmetric";
    case BaselineKind::smooth_scale: return "smooth_scale";
    case BaselineKind::rotation: return "rotation";
    case BaselineKind::learned_affine: return "learned_affine";
  }
  return "?";
}

BaselineKind parse_baseline(const std::string& name) {
  for (BaselineKind k : {BaselineKind::symmetric, BaselineKind::smooth_scale, BaselineKind::rotation,
                         BaselineKind::learned_affine})
    if (name == baseline_name(k)) return k;
  throw ConfigError("unknown baseline '" + name + "'");
}

TransformParam smooth_transform(const Tensor& inputs, const std::vector<const Tensor*>& weights, double alpha) {
  const std::size_t d = inputs.cols();
  std::vector<double> xmax(d, 0.0), wmax(d, 0.0);
  for (std::size_t r = 0; r < inputs.rows(); ++r)
    for (std::size_t j = 0; j < d; ++j) xmax[j] = std::max(xmax[j], std::abs(inputs(r, j)));
  for (const Tensor* w : weights) {
    if (w->cols() != d) throw DimensionError("smooth_transform: weight input width mismatch");
    for (std::size_t r = 0; r < w->rows(); ++r)
      for (std::size_t j = 0; j < d; ++j) wmax[j] = std::max(wmax[j], std::abs((*w)(r, j)));
  }
  Tensor p = Tensor::zeros(d, d);
  for (std::size_t j = 0; j < d; ++j) {
    double s = 1.0;
    if (xmax[j] > 0.0 && wmax[j] > 0.0) s = std::pow(xmax[j], alpha) / std::pow(wmax[j], 1.0 - alpha);
    p(j, j) = 1.0 / s;
  }
  return TransformParam::full(TransformMode::diagonal, std::move(p));
}

namespace {

Tensor stack_rows(const std::vector<Tensor>& parts) {
  std::vector<double> data;
  std::size_t rows = 0;
  for (const Tensor& t : parts) {
    data.insert(data.end(), t.data().begin(), t.data().end());
    rows += t.rows();
  }
  return Tensor({rows, parts.at(0).cols()}, std::move(data));
}

}  // namespace

QuantScheme apply_baseline(BaselineKind kind, const LoopedModel& model, const QuantSpec& spec,
                           const BaselineContext& ctx, CalibrationReport* report) {
  if (ctx.record == nullptr) throw ContractError("baselines need recorded activation statistics");
  QuantScheme scheme = QuantScheme::make(model.config, spec);
  for (std::size_t g = 0; g < scheme.groups.size(); ++g) {
    GroupScheme& gs = scheme.groups[g];
    switch (kind) {
      case BaselineKind::symmetric: break;
      case BaselineKind::smooth_scale:
        gs.shared = smooth_transform(stack_rows(ctx.record->inputs[g]), group_weights(model, gs.id));
        break;
      case BaselineKind::rotation:
        gs.shared = TransformParam::full(TransformMode::orthogonal, random_orthogonal(gs.in_dim, ctx.seed * 1009 + g));
        break;
      case BaselineKind::learned_affine: gs.shared = TransformParam::affine(gs.in_dim, ctx.kronecker); break;
    }
  }
  calibrate_static_scales(scheme, *ctx.record, ctx.rule);
  if (kind == BaselineKind::learned_affine) {
    if (ctx.teacher == nullptr) throw ContractError("learned_affine needs calibration data");
    OptimConfig opt = ctx.optim;
    opt.train = {true, true, false, {}};
    TransitionAdapters none;
    CalibrationReport rep = run_calibration(model, scheme, none, *ctx.teacher, ctx.loss, opt);
    if (report) *report = std::move(rep);
  }
  return scheme;
}

}  // namespace loopq
