#include <gtest/gtest.h>

#include "loopq/calibrate.hpp"
#include "loopq/errors.hpp"
#include "loopq/quant_forward.hpp"
#include "support.hpp"

using namespace loopq;
using namespace loopq::testing;

namespace {

QuantSpec spec_bits(int w, int a, std::size_t gs = 8) {
  QuantSpec s;
  s.bits_w = w;
  s.bits_a = a;
  s.group_size = gs;
  return s;
}

void expect_states_equal(const Trajectory& a, const Trajectory& b) {
  ASSERT_EQ(a.loops(), b.loops());
  for (std::size_t t = 0; t < a.loops(); ++t)
    for (std::size_t l = 0; l < a.states[t].size(); ++l) EXPECT_EQ(a.states[t][l], b.states[t][l]);
  EXPECT_EQ(a.logits, b.logits);
}

struct Toy {
  ModelConfig cfg = small_block_config(16, 2, 3);
  LoopedModel model = init_model(cfg, 4);
  TokenBatch batch = random_batch(cfg.vocab, 2, 5, 8);
};

QuantScheme calibrated_scheme(const Toy& toy, const QuantSpec& spec) {
  QuantScheme s = QuantScheme::make(toy.cfg, spec);
  calibrate_static_scales(s, record_group_inputs(toy.model, std::span<const TokenBatch>(&toy.batch, 1)));
  return s;
}

}  // namespace

TEST(QuantForward, UnquantizedTransformsPreserveFunction) {
  Toy toy;
  const Trajectory fp = forward(toy.model, toy.batch, true);
  Rng rng(3);
  for (int mode = 0; mode < 4; ++mode) {
    QuantScheme s = QuantScheme::make(toy.cfg, spec_bits(0, 0));
    for (GroupScheme& g : s.groups) {
      if (mode == 1) g.shared = TransformParam::full(TransformMode::orthogonal, random_orthogonal(g.in_dim, rng.next_u64()));
      if (mode == 2) g.shared = random_affine(g.in_dim, rng, false);
      if (mode == 3) g.shared = random_affine(g.in_dim, rng, true);
    }
    const Trajectory q = quantized_forward(toy.model, s, {}, toy.batch);
    for (std::size_t t = 0; t < fp.loops(); ++t)
      for (std::size_t l = 0; l <= toy.cfg.layers; ++l)
        EXPECT_LT(rel_err(q.states[t][l], fp.states[t][l]), 1e-8) << "mode " << mode << " t=" << t << " l=" << l;
  }
}

TEST(QuantForward, IdentityAdaptersAreBitExact) {
  Toy toy;
  const QuantScheme s = calibrated_scheme(toy, spec_bits(4, 4));
  const TransitionAdapters ad = TransitionAdapters::identity(toy.cfg.d, toy.cfg.loops, 4, 1);
  ASSERT_EQ(ad.transitions(), 2u);
  expect_states_equal(quantized_forward(toy.model, s, ad, toy.batch), quantized_forward(toy.model, s, {}, toy.batch));
}

TEST(QuantForward, UntyingIsBitNeutral) {
  Toy toy;
  QuantScheme s = calibrated_scheme(toy, spec_bits(4, 4));
  Rng rng(1);
  for (GroupScheme& g : s.groups) g.shared = random_affine(g.in_dim, rng, true);
  const Trajectory before = quantized_forward(toy.model, s, {}, toy.batch);
  for (std::size_t g : {0, 5}) untie_group(s.groups[g], s.loops);
  expect_states_equal(quantized_forward(toy.model, s, {}, toy.batch), before);
}

TEST(QuantForward, LayerAndLoopFunctionsMatchTrajectory) {
  Toy toy;
  QuantScheme s = calibrated_scheme(toy, spec_bits(4, 4));
  untie_group(s.groups[1], s.loops);
  s.groups[1].loop_scales[2] = scaled(s.groups[1].loop_scales[2], 1.3);
  const Trajectory q = quantized_forward(toy.model, s, {}, toy.batch);
  for (std::size_t t = 0; t < q.loops(); ++t) {
    for (std::size_t l = 0; l < toy.cfg.layers; ++l)
      EXPECT_EQ(quantized_layer_forward(toy.model, s, q.states[t][l], t, l, toy.batch.seq_len), q.states[t][l + 1]);
    EXPECT_EQ(quantized_loop_function(toy.model, s, q.loop_input(t), t, toy.batch.seq_len), q.loop_output(t));
  }
  EXPECT_THROW(quantized_loop_function(toy.model, s, q.loop_input(0), 3), ContractError);
}

TEST(QuantForward, ExtrapolationReusesLastLoop) {
  Toy toy;
  QuantScheme s = calibrated_scheme(toy, spec_bits(4, 4));
  untie_group(s.groups[0], s.loops);
  s.groups[0].loop_scales[2] = scaled(s.groups[0].loop_scales[2], 0.7);
  const Trajectory q = quantized_forward(toy.model, s, {}, toy.batch, 6);
  ASSERT_EQ(q.loops(), 6u);
  for (std::size_t t = 3; t < 6; ++t)
    EXPECT_EQ(quantized_loop_function(toy.model, s, q.loop_input(t), 2, toy.batch.seq_len), q.loop_output(t));
}

TEST(QuantForward, AdaptersChangeOnlyLaterLoops) {
  Toy toy;
  const QuantScheme s = calibrated_scheme(toy, spec_bits(4, 4));
  TransitionAdapters ad = TransitionAdapters::identity(toy.cfg.d, toy.cfg.loops, 4, 1);
  ad.b[1] = Tensor::full(1, toy.cfg.d, 0.1);
  const Trajectory plain = quantized_forward(toy.model, s, {}, toy.batch);
  const Trajectory adapted = quantized_forward(toy.model, s, ad, toy.batch);
  for (std::size_t t = 0; t < 2; ++t) EXPECT_EQ(adapted.states[t], plain.states[t]);
  EXPECT_EQ(adapted.loop_input(2), apply_cta(ad, adapted.loop_output(1), 1));
  EXPECT_NE(adapted.loop_input(2), plain.loop_input(2));
  EXPECT_THROW(apply_cta(ad, adapted.loop_output(1), 2), ContractError);
}

TEST(QuantForward, AdapterHandValue) {
  // A(h) = h + r (a - 1) + b + ((r V) .* eta) U^T with r = rms_norm(h).
  TransitionAdapters ad = TransitionAdapters::identity(2, 2, 1, 0);
  ad.norm_eps = 0.0;
  ad.a[0] = Tensor::from_rows({{2.0, 1.0}});
  ad.b[0] = Tensor::from_rows({{0.0, 1.0}});
  ad.eta[0] = Tensor::scalar(2.0);
  ad.u = Tensor::from_rows({{1.0}, {0.0}});
  ad.v = Tensor::from_rows({{0.0}, {1.0}});
  const Tensor h = Tensor::from_rows({{3.0, 4.0}});
  const double rms = std::sqrt(12.5);
  const Tensor r = Tensor::from_rows({{3.0 / rms, 4.0 / rms}});
  const Tensor expect = Tensor::from_rows({{3.0 + r[0] + 2.0 * r[1], 4.0 + 1.0}});
  EXPECT_LT(max_abs_diff(apply_cta(ad, h, 0), expect), 1e-14);
}

TEST(Binder, LeavesFollowMaskAndSplit) {
  Toy toy;
  QuantScheme s = calibrated_scheme(toy, spec_bits(4, 4));
  for (GroupScheme& g : s.groups) g.shared = TransformParam::affine(g.in_dim);
  const TransitionAdapters ad = TransitionAdapters::identity(toy.cfg.d, toy.cfg.loops, 4, 1);
  {
    Binder b(s, ad, {});
    quantized_forward(toy.model, toy.batch, b);
    EXPECT_TRUE(b.leaves().empty());
  }
  std::vector<bool> split(s.groups.size(), false);
  split[2] = true;
  Binder b(s, ad, {TrainableMask{false, true, false, {}}, split, 0});
  quantized_forward(toy.model, toy.batch, b);
  std::size_t scales = 0, per_loop_transforms = 0;
  for (const auto& [key, node] : b.leaves()) {
    if (key.slot == Slot::scale) ++scales;
    if (key.slot == Slot::transform_a) {
      EXPECT_EQ(key.group, 2u);
      EXPECT_TRUE(key.per_loop);
      ++per_loop_transforms;
    }
  }
  EXPECT_EQ(scales, s.groups.size());
  EXPECT_EQ(per_loop_transforms, s.loops);
  TransitionAdapters ad2 = ad;
  EXPECT_THROW(locate(s, ad2, {Slot::transform_a, 2, 1, true}), ContractError);
  EXPECT_EQ(&locate(s, ad2, {Slot::scale, 3, 0, false}), &s.groups[3].shared_scale);
}

TEST(Binder, GradientsMatchFiniteDifferencesWithoutQuantization) {
  // With quantization off the loss is smooth in the adapters and constant in the transforms.
  ModelConfig cfg = small_block_config(4, 1, 3);
  cfg.ffn = 8;
  cfg.vocab = 9;
  cfg.init_std = 0.4;
  const LoopedModel model = init_model(cfg, 2);
  const TokenBatch batch = random_batch(cfg.vocab, 1, 3, 1);
  Rng rng(5);
  QuantScheme s = QuantScheme::make(cfg, spec_bits(0, 0, 2));
  for (GroupScheme& g : s.groups) g.shared = random_affine(g.in_dim, rng, true);
  untie_group(s.groups[1], s.loops);
  TransitionAdapters ad = TransitionAdapters::identity(cfg.d, cfg.loops, 2, 3);
  for (std::size_t t = 0; t < ad.transitions(); ++t) {
    ad.a[t] = add(ad.a[t], rng.normal_matrix(1, cfg.d, 0.2));
    ad.eta[t] = rng.normal_matrix(1, 2, 0.5);
  }
  ad.u = rng.normal_matrix(cfg.d, 2, 0.5);
  ad.v = rng.normal_matrix(cfg.d, 2, 0.5);
  CalibLossConfig lc;
  lc.teacher_topk = 4;
  const std::vector<double> mu{0.5, 0.3, 0.0};
  const Trajectory target = forward(model, batch, true);
  auto loss_at = [&](const QuantScheme& sc, const TransitionAdapters& a, Binder* keep) {
    Binder local(sc, a, {TrainableMask{true, true, true, {}}, {}, 0});
    Binder& b = keep ? *keep : local;
    const QuantTrajectory q = quantized_forward(model, batch, b);
    Trajectory shifted = target;
    for (auto& row : shifted.states)
      for (Tensor& x : row) x = scaled(x, 1.1);
    return trajectory_loss(shifted, q, lc, mu).total;
  };
  Binder binder(s, ad, {TrainableMask{true, true, true, {}}, {}, 0});
  backward(loss_at(s, ad, &binder));
  std::size_t checked = 0;
  for (const auto& [key, node] : binder.leaves()) {
    if (key.slot == Slot::scale) continue;  // unused with activations unquantized
    const Tensor analytic = node.grad();
    if (key.slot == Slot::transform_a || key.slot == Slot::transform_b) {
      // Unquantized transforms cancel exactly, so the loss is flat in them.
      EXPECT_LT(max_abs(analytic), 1e-10);
      continue;
    }
    Tensor numeric(analytic.shape());
    for (std::size_t j = 0; j < analytic.size(); ++j) {
      QuantScheme sp = s;
      TransitionAdapters ap = ad;
      const double h = 1e-6;
      locate(sp, ap, key)[j] += h;
      const double up = loss_at(sp, ap, nullptr).value().item();
      locate(sp, ap, key)[j] -= 2 * h;
      const double down = loss_at(sp, ap, nullptr).value().item();
      numeric[j] = (up - down) / (2 * h);
    }
    EXPECT_LT(rel_err(analytic, numeric), 1e-6) << "slot " << static_cast<int>(key.slot) << " group " << key.group;
    ++checked;
  }
  EXPECT_EQ(checked, 3 * ad.transitions() + 2);
}
