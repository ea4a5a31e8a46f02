#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "loopq/calibrate.hpp"
#include "loopq/errors.hpp"
#include "support.hpp"

using namespace loopq;
using namespace loopq::testing;

namespace {

double sq_mean(const Tensor& a, const Tensor& b) { return squared_norm(sub(a, b)) / static_cast<double>(a.size()); }

// Row-wise KL(p || q) over the teacher's top-k entries, both renormalised.
double ref_kl(const Tensor& teacher, const Tensor& student, double temp, std::size_t k) {
  double total = 0;
  for (std::size_t r = 0; r < teacher.rows(); ++r) {
    std::vector<std::size_t> idx(teacher.cols());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return teacher(r, a) > teacher(r, b); });
    idx.resize(std::min(k, idx.size()));
    double zp = 0, zq = 0;
    for (auto j : idx) {
      zp += std::exp(teacher(r, j) / temp);
      zq += std::exp(student(r, j) / temp);
    }
    for (auto j : idx) {
      const double p = std::exp(teacher(r, j) / temp) / zp, q = std::exp(student(r, j) / temp) / zq;
      total += p * std::log(p / q);
    }
  }
  return total / static_cast<double>(teacher.rows());
}

struct CalibToy {
  ModelConfig cfg = small_block_config(16, 2, 3);
  LoopedModel model;
  QuantScheme scheme;
  TransitionAdapters adapters;
  TeacherSet teacher;

  explicit CalibToy(std::uint64_t seed, bool cta = true) {
    cfg.init_std = 0.1;
    model = init_model(cfg, seed);
    std::vector<TokenBatch> batches{random_batch(cfg.vocab, 2, 6, seed + 1), random_batch(cfg.vocab, 2, 6, seed + 2)};
    QuantSpec spec;
    spec.group_size = 8;
    scheme = QuantScheme::make(cfg, spec);
    for (GroupScheme& g : scheme.groups) g.shared = TransformParam::affine(g.in_dim);
    calibrate_static_scales(scheme, record_group_inputs(model, batches));
    if (cta) adapters = TransitionAdapters::identity(cfg.d, cfg.loops, 4, seed);
    teacher = make_teacher(model, std::move(batches));
  }
};

}  // namespace

TEST(Loss, MatchesIndependentOracle) {
  CalibToy s(3);
  s.adapters.b[0] = Tensor::full(1, s.cfg.d, 0.05);
  CalibLossConfig cfg;
  cfg.lambda = 0.3;
  cfg.kl_temperature = 1.7;
  cfg.teacher_topk = 10;
  const std::vector<double> mu{0.6, 0.2, 0.1};
  Binder b(s.scheme, s.adapters, {});
  const QuantTrajectory qn = quantized_forward(s.model, s.teacher.batches[0], b);
  const LossTerms terms = trajectory_loss(s.teacher.fp[0], qn, cfg, mu);
  const Trajectory q = qn.values();
  const Trajectory& fp = s.teacher.fp[0];

  double hidden = 0, final_target = 0, transition = 0;
  for (std::size_t t = 0; t < 3; ++t) {
    hidden += (1 - mu[t]) * sq_mean(q.loop_output(t), fp.loop_output(t));
    final_target += mu[t] * sq_mean(q.loop_output(t), fp.final_state);
  }
  for (std::size_t t = 0; t + 1 < 3; ++t)
    transition += sq_mean(apply_cta(s.adapters, q.loop_output(t), t), fp.loop_input(t + 1));
  const double kl = ref_kl(fp.logits, q.logits, 1.7, 10);
  EXPECT_NEAR(terms.kl.value().item(), kl, 1e-12);
  EXPECT_NEAR(terms.hidden.value().item(), hidden, 1e-12);
  EXPECT_NEAR(terms.final_target.value().item(), final_target, 1e-12);
  EXPECT_NEAR(terms.transition.value().item(), transition, 1e-12);
  EXPECT_NEAR(terms.total.value().item(), kl + 0.3 * (hidden + final_target + transition), 1e-12);

  cfg.mean_norms = false;
  const double n = static_cast<double>(fp.final_state.size());
  EXPECT_NEAR(trajectory_loss(fp, qn, cfg, mu).hidden.value().item(), hidden * n, 1e-9);
}

TEST(Loss, FixedWeightsAndNoAdapterTransition) {
  CalibToy s(4, false);
  CalibLossConfig cfg;
  cfg.adaptive_mu = false;
  Binder b(s.scheme, s.adapters, {});
  const QuantTrajectory qn = quantized_forward(s.model, s.teacher.batches[0], b);
  const LossTerms terms = trajectory_loss(s.teacher.fp[0], qn, cfg, {});
  const Trajectory q = qn.values();
  const Trajectory& fp = s.teacher.fp[0];
  double hidden = 0, final_target = 0, head = 0;
  for (std::size_t t = 0; t < 3; ++t) {
    hidden += sq_mean(q.loop_output(t), fp.loop_output(t));
    final_target += sq_mean(q.loop_output(t), fp.final_state);
    if (t < 2) head += sq_mean(q.loop_output(t), fp.loop_output(t));
  }
  EXPECT_NEAR(terms.hidden.value().item(), hidden, 1e-12);
  EXPECT_NEAR(terms.final_target.value().item(), final_target, 1e-12);
  // Without adapters the transition target equals the previous loop output.
  EXPECT_NEAR(terms.transition.value().item(), head, 1e-12);
}

TEST(Mu, HandValuesAndRange) {
  // One-column states make the distances easy to write down.
  Trajectory fp, q;
  fp.states = {{Tensor::scalar(0), Tensor::scalar(1)}, {Tensor::scalar(1), Tensor::scalar(3)}};
  fp.final_state = Tensor::scalar(3);
  q.states = {{Tensor::scalar(0), Tensor::scalar(2)}, {Tensor::scalar(2), Tensor::scalar(5)}};
  q.final_state = Tensor::scalar(5);
  // num = (3-1)^2 = 4, 0; mismatch = 1, 4 -> mu_1 = 0 / (0 + 4), mu_0 = 4 / (4 + 1 + 4).
  const auto mu = compute_mu(fp, q, 0.0);
  EXPECT_NEAR(mu[0], 4.0 / 9.0, 1e-15);
  EXPECT_EQ(mu[1], 0.0);
  // A perfect student gives mu close to but below one.
  const auto same = compute_mu(fp, fp, 1e-8);
  EXPECT_LT(same[0], 1.0);
  EXPECT_GT(same[0], 0.99);
}

TEST(Mu, AlwaysInUnitInterval) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CalibToy s(seed);
    for (double v : current_mu(s.model, s.scheme, s.adapters, s.teacher, CalibLossConfig{})) {
      EXPECT_GE(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Calibration, DecompositionAndDescent) {
  CalibToy s(5);
  untie_group(s.scheme.groups[2], s.scheme.loops);
  CalibLossConfig cfg;
  cfg.mu_update_interval = 10;
  OptimConfig opt;
  opt.steps = 30;
  const CalibrationReport r = run_calibration(s.model, s.scheme, s.adapters, s.teacher, cfg, opt);
  ASSERT_EQ(r.steps.size(), 30u);
  for (const CalibrationStep& st : r.steps) {
    const LossBreakdown& l = st.loss;
    EXPECT_NEAR(l.total, l.kl + cfg.lambda * (l.hidden + l.final_target + l.transition), 1e-9 * l.total);
    EXPECT_GT(st.grad_norm, 0.0);
  }
  EXPECT_LT(r.final.total, r.initial.total);
  for (double v : r.final_mu) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_NO_THROW(s.scheme.validate(s.cfg));
  EXPECT_NE(s.adapters.b[0], Tensor::zeros(1, s.cfg.d));
}

TEST(Calibration, FrozenMaskLeavesParametersAlone) {
  CalibToy s(6);
  const QuantScheme before = s.scheme;
  OptimConfig opt;
  opt.steps = 3;
  opt.train = {false, false, false};
  const CalibrationReport r = run_calibration(s.model, s.scheme, s.adapters, s.teacher, CalibLossConfig{}, opt);
  for (std::size_t g = 0; g < before.groups.size(); ++g)
    EXPECT_EQ(s.scheme.groups[g].shared_scale, before.groups[g].shared_scale);
  EXPECT_DOUBLE_EQ(r.final.total, r.initial.total);
}

TEST(Calibration, FisherIsNonNegativeMeanSquare) {
  CalibToy s(7);
  const auto mu = current_mu(s.model, s.scheme, s.adapters, s.teacher, CalibLossConfig{});
  const auto psi = estimate_fisher(s.model, s.scheme, s.adapters, s.teacher, CalibLossConfig{}, mu, {true, true, false});
  ASSERT_FALSE(psi.empty());
  for (const auto& [key, t] : psi) {
    EXPECT_NE(key.slot, Slot::cta_a);
    for (double v : t.data()) EXPECT_GE(v, 0.0);
  }
}

TEST(Calibration, ConfigValidation) {
  CalibLossConfig c;
  c.kl_temperature = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.mu_update_interval = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lambda = -1;
  EXPECT_THROW(c.validate(), ConfigError);
}
