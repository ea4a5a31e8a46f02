#include <gtest/gtest.h>

#include <cmath>

#include "loopq/data.hpp"
#include "loopq/errors.hpp"
#include "loopq/model.hpp"
#include "support.hpp"

using namespace loopq;
using namespace loopq::testing;

namespace {

// Plain-tensor reference block, written independently of the graph code.
Tensor ref_rms(const Tensor& x, const Tensor& gain, double eps) {
  Tensor y = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double ms = 0;
    for (std::size_t c = 0; c < x.cols(); ++c) ms += x(r, c) * x(r, c);
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.cols()) + eps);
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = x(r, c) * inv * (gain.empty() ? 1.0 : gain[c]);
  }
  return y;
}

Tensor ref_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq, std::size_t heads) {
  const std::size_t d = q.cols(), hd = d / heads;
  Tensor out = Tensor::zeros(q.rows(), d);
  for (std::size_t b = 0; b < q.rows() / seq; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < seq; ++i) {
        std::vector<double> w(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < hd; ++c) s += q(b * seq + i, h * hd + c) * k(b * seq + j, h * hd + c);
          w[j] = s / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, w[j]);
        }
        double z = 0;
        for (double& x : w) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t c = 0; c < hd; ++c) out(b * seq + i, h * hd + c) += w[j] / z * v(b * seq + j, h * hd + c);
      }
  return out;
}

Tensor ref_block(const LayerWeights& w, const Tensor& h, std::size_t seq, std::size_t heads, double eps) {
  const Tensor a = ref_rms(h, w.attn_norm, eps);
  const Tensor att = ref_attention(matmul(a, w.wq.transposed()), matmul(a, w.wk.transposed()),
                                   matmul(a, w.wv.transposed()), seq, heads);
  const Tensor h1 = add(h, matmul(att, w.wo.transposed()));
  const Tensor m = ref_rms(h1, w.mlp_norm, eps);
  Tensor g = matmul(m, w.w_gate.transposed());
  const Tensor u = matmul(m, w.w_up.transposed());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
  return add(h1, matmul(g, w.w_down.transposed()));
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = small_block_config();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_block_config();
  c.loops = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_block_config();
  c.layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Model, InitIsDeterministic) {
  const ModelConfig c = small_block_config();
  const LoopedModel a = init_model(c, 5), b = init_model(c, 5), x = init_model(c, 6);
  const auto ta = a.tensors(), tb = b.tensors(), tx = x.tensors();
  ASSERT_EQ(ta.size(), 2 + 9 * c.layers);
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(*ta[i], *tb[i]);
  EXPECT_NE(*ta[2 + 1], *tx[2 + 1]);
}

TEST(Model, ForwardMatchesReferenceBlock) {
  ModelConfig c = small_block_config(8, 2, 3);
  c.init_std = 0.3;  // large enough that every sublayer matters
  const LoopedModel m = init_model(c, 9);
  const TokenBatch batch = random_batch(c.vocab, 2, 5, 1);
  const Trajectory tr = forward(m, batch, true);

  Tensor h({batch.rows(), c.d});
  for (std::size_t i = 0; i < batch.rows(); ++i)
    for (std::size_t j = 0; j < c.d; ++j) h(i, j) = m.embed(batch.ids[i], j);
  ASSERT_EQ(tr.loops(), c.loops);
  for (std::size_t t = 0; t < c.loops; ++t) {
    ASSERT_EQ(tr.states[t].size(), c.layers + 1);
    EXPECT_LT(max_abs_diff(tr.states[t][0], h), 1e-12);
    for (std::size_t l = 0; l < c.layers; ++l) {
      h = ref_block(m.layers[l], h, batch.seq_len, c.heads, c.norm_eps);
      EXPECT_LT(rel_err(tr.states[t][l + 1], h), 1e-12) << "t=" << t << " l=" << l;
    }
  }
  EXPECT_LT(rel_err(tr.final_state, h), 1e-12);
  EXPECT_LT(rel_err(tr.logits, matmul(ref_rms(h, Tensor(), c.norm_eps), m.proj.transposed())), 1e-12);
}

TEST(Model, LinearToyIsMatrixProduct) {
  ModelConfig c = small_block_config(6, 2, 4);
  c.kind = LayerKind::linear;
  const LoopedModel m = init_model(c, 3);
  const TokenBatch batch = random_batch(c.vocab, 1, 4, 2);
  const Trajectory tr = forward(m, batch, true);
  const Tensor step = matmul(m.layers[1].w, m.layers[0].w);  // H <- H W1^T W2^T
  Tensor h = tr.states[0][0];
  for (std::size_t t = 0; t < c.loops; ++t) h = matmul(h, step.transposed());
  EXPECT_LT(rel_err(tr.final_state, h), 1e-12);
}

TEST(Model, TrajectoryConsistency) {
  const ModelConfig c = small_block_config();
  const LoopedModel m = init_model(c, 1);
  const TokenBatch batch = random_batch(c.vocab, 2, 6, 3);
  const Trajectory tr = forward(m, batch, true);
  for (std::size_t t = 0; t + 1 < tr.loops(); ++t) EXPECT_EQ(tr.loop_input(t + 1), tr.loop_output(t));
  EXPECT_EQ(tr.loop_input(tr.loops()), tr.final_state);
  for (std::size_t t = 0; t < tr.loops(); ++t)
    EXPECT_EQ(loop_function(m, tr.loop_input(t), batch.seq_len), tr.loop_output(t));
  const Trajectory bare = forward(m, batch, false);
  EXPECT_TRUE(bare.states.empty());
  EXPECT_EQ(bare.final_state, tr.final_state);
  EXPECT_EQ(forward(m, batch, true, 5).loops(), 5u);
}

TEST(Model, LoopFunctionRejectsBadInput) {
  const LoopedModel m = init_model(small_block_config(), 1);
  EXPECT_THROW(loop_function(m, Tensor::zeros(3, 7)), DimensionError);
  EXPECT_THROW(loop_function(m, Tensor()), DimensionError);
}

TEST(Model, WholeModelGradientMatchesFiniteDifferences) {
  ModelConfig c = small_block_config(4, 1, 2);
  c.ffn = 6;
  c.vocab = 7;
  c.init_std = 0.4;
  const LoopedModel m = init_model(c, 11);
  const TokenBatch batch = random_batch(c.vocab, 1, 3, 5);
  const std::vector<int> targets{3, 1, -1};
  const ScalarFn f = [&](const std::vector<Node>& x) {
    ModelNodes n = ModelNodes::constants(m);
    n.layers[0].wq = x[0];
    n.layers[0].w_down = x[1];
    n.layers[0].mlp_norm = x[2];
    FullPrecisionLinear lin;
    Node h = embed_tokens(n, batch);
    for (std::size_t t = 0; t < c.loops; ++t) h = run_layer(c, n, 0, h, batch.seq_len, lin);
    return cross_entropy(output_logits(c, n, h), targets);
  };
  EXPECT_LT(grad_check(f, {m.layers[0].wq, m.layers[0].w_down, m.layers[0].mlp_norm}, 3), 1e-6);
}

TEST(Model, GroupsAndDims) {
  ModelConfig c = small_block_config(16, 2, 3);
  const auto groups = transform_groups(c);
  ASSERT_EQ(groups.size(), 8u);
  EXPECT_EQ(groups[3].name(), "L0.down");
  EXPECT_EQ(groups[4].name(), "L1.qkv");
  EXPECT_EQ(group_input_dim(c, GroupKind::down), c.ffn);
  EXPECT_EQ(group_input_dim(c, GroupKind::qkv), c.d);
  const LoopedModel m = init_model(c, 0);
  EXPECT_EQ(group_weights(m, groups[0]).size(), 3u);
  EXPECT_EQ(group_weights(m, groups[2]).size(), 2u);
  EXPECT_EQ(parse_group_kind("up_gate"), GroupKind::up_gate);
  EXPECT_THROW(parse_group_kind("nope"), ConfigError);
  c.kind = LayerKind::linear;
  EXPECT_EQ(transform_groups(c).size(), 2u);
}

TEST(Model, PretrainReducesLoss) {
  ModelConfig c = small_block_config(16, 2, 2);
  LoopedModel m = init_model(c, 2);
  const auto batches = make_batches(c.vocab, 64, 12, 8, 2, 9);
  const PretrainReport r = pretrain(m, batches, 80, 3e-3);
  ASSERT_EQ(r.losses.size(), 80u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += r.losses[i];
    tail += r.losses[70 + i];
  }
  EXPECT_LT(tail, head);
}

TEST(Data, MarkovSourceIsDeterministicAndSkewed) {
  const auto a = make_batches(20, 10, 50, 4, 1, 2);
  const auto b = make_batches(20, 10, 50, 4, 1, 2);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a.back().batch, 2u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].ids, b[i].ids);
  EXPECT_NE(make_batches(20, 10, 50, 4, 1, 3)[0].ids, a[0].ids);
  // Zipf successor law: the most frequent successor of a state is far above uniform.
  std::vector<std::vector<int>> counts(20, std::vector<int>(20, 0));
  for (const auto& bt : make_batches(20, 200, 50, 50, 1, 7))
    for (std::size_t s = 0; s < bt.batch; ++s)
      for (std::size_t i = 0; i + 1 < bt.seq_len; ++i) ++counts[bt.ids[s * 50 + i]][bt.ids[s * 50 + i + 1]];
  int best = 0, total = 0;
  for (int x : counts[0]) {
    best = std::max(best, x);
    total += x;
  }
  EXPECT_GT(static_cast<double>(best) / total, 2.0 / 20);
}
