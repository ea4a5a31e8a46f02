#include "loopq/quant.hpp"

#include <algorithm>
#include <cmath>

#include "loopq/errors.hpp"
#include "loopq/linalg.hpp"

namespace loopq {

void QuantSpec::validate() const {
  auto ok = [](int b) { return b == 0 || (b >= 2 && b <= 8); };
  if (!ok(bits_w) || !ok(bits_a)) throw ConfigError("bit widths must be 0 (disabled) or in [2, 8]");
  if (group_size == 0) throw ConfigError("group_size must be positive");
}

void QuantSpec::check_model(const ModelConfig& config) const {
  validate();
  for (const GroupId& g : transform_groups(config)) {
    const std::size_t dim = group_input_dim(config, g.kind);
    if (dim % group_size != 0)
      throw ConfigError("group_size " + std::to_string(group_size) + " does not divide dimension " +
                        std::to_string(dim) + " of group " + g.name());
  }
}

double qmin_for(int bits) { return bits > 0 ? -std::ldexp(1.0, bits - 1) : 0.0; }
double qmax_for(int bits) { return bits > 0 ? std::ldexp(1.0, bits - 1) - 1.0 : 0.0; }

namespace {

void check_act_args(const Tensor& x, const Tensor& c, std::size_t group_size) {
  if (group_size == 0 || x.cols() % group_size != 0)
    throw DimensionError("activation width " + std::to_string(x.cols()) + " not divisible by group size");
  if (c.rows() != 1 || c.cols() != x.cols() / group_size)
    throw DimensionError("scale row " + shape_string(c.shape()) + " does not match activation groups");
  for (double v : c.data())
    if (!(v > 0.0) || !std::isfinite(v)) throw ParameterError("activation scale must be positive and finite");
}

}  // namespace

Tensor quantize_act(const Tensor& x, const Tensor& c, int bits, std::size_t group_size) {
  if (bits == 0) return x;
  check_act_args(x, c, group_size);
  const double lo = qmin_for(bits), hi = qmax_for(bits);
  Tensor out(x.shape());
  const std::size_t cols = x.cols();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = c[(i % cols) / group_size];
    out[i] = s * std::clamp(std::nearbyint(x[i] / s), lo, hi);
  }
  return out;
}

Node quantize_act(const Node& x, const Node& c, int bits, std::size_t group_size) {
  if (bits == 0) return x;
  Tensor out = quantize_act(x.value(), c.value(), bits, group_size);
  const double lo = qmin_for(bits), hi = qmax_for(bits);
  return Node::make(std::move(out), {x, c}, [x, c, lo, hi, group_size](const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& cv = c.value();
    const std::size_t cols = xv.cols();
    Tensor gx(xv.shape());
    Tensor gc(cv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const std::size_t k = (i % cols) / group_size;
      const double r = xv[i] / cv[k];
      const double q = std::clamp(std::nearbyint(r), lo, hi);
      if (r >= lo && r <= hi) {
        gx[i] = g[i];
        gc[k] += g[i] * (q - r);
      } else {
        gc[k] += g[i] * q;
      }
    }
    if (x.requires_grad()) x.accumulate(gx);
    if (c.requires_grad()) c.accumulate(gc);
  });
}

Tensor quantize_weight(const Tensor& w, int bits, std::size_t group_size) {
  if (bits == 0) return w;
  if (group_size == 0 || w.cols() % group_size != 0)
    throw DimensionError("weight input width " + std::to_string(w.cols()) + " not divisible by group size");
  if (!w.all_finite()) throw NumericError("quantize_weight: non-finite weight");
  const double lo = qmin_for(bits), hi = qmax_for(bits);
  Tensor out(w.shape());
  const std::size_t rows = w.rows(), cols = w.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g0 = 0; g0 < cols; g0 += group_size) {
      double m = 0.0;
      for (std::size_t j = g0; j < g0 + group_size; ++j) m = std::max(m, std::abs(w(r, j)));
      const double s = std::max(m / hi, kWeightScaleFloor);
      for (std::size_t j = g0; j < g0 + group_size; ++j) out(r, j) = s * std::clamp(std::nearbyint(w(r, j) / s), lo, hi);
    }
  }
  return out;
}

Node quantize_weight(const Node& w, int bits, std::size_t group_size) {
  if (bits == 0) return w;
  return straight_through(w, quantize_weight(w.value(), bits, group_size));
}

// --------------------------------------------------------------- transforms

const char* transform_mode_name(TransformMode mode) {
  switch (mode) {
    case TransformMode::identity: return "identity";
    case TransformMode::orthogonal: return "orthogonal";
    case TransformMode::diagonal: return "diagonal";
    case TransformMode::affine: return "affine";
  }
  return "?";
}

TransformMode parse_transform_mode(const std::string& name) {
  for (TransformMode m : {TransformMode::identity, TransformMode::orthogonal, TransformMode::diagonal,
                          TransformMode::affine})
    if (name == transform_mode_name(m)) return m;
  throw ConfigError("unknown transform mode '" + name + "'");
}

std::pair<std::size_t, std::size_t> kronecker_factors(std::size_t d) {
  std::size_t da = 1;
  for (std::size_t k = 1; k * k <= d; ++k)
    if (d % k == 0) da = k;
  return {da, d / da};
}

TransformParam TransformParam::identity(std::size_t d) {
  TransformParam p;
  p.a = Tensor::identity(d);
  return p;
}

TransformParam TransformParam::full(TransformMode mode, Tensor m) {
  if (m.rank() != 2 || m.rows() != m.cols()) throw DimensionError("transform must be square");
  TransformParam p;
  p.mode = mode;
  p.a = std::move(m);
  return p;
}

TransformParam TransformParam::affine(std::size_t d, bool kronecker) {
  TransformParam p;
  p.mode = TransformMode::affine;
  p.kronecker = kronecker;
  if (kronecker) {
    const auto [da, db] = kronecker_factors(d);
    p.a = Tensor::identity(da);
    p.b = Tensor::identity(db);
  } else {
    p.a = Tensor::identity(d);
  }
  return p;
}

std::size_t TransformParam::dim() const { return kronecker ? a.rows() * b.rows() : a.rows(); }

Tensor TransformParam::matrix() const { return kronecker ? kron(a, b) : a; }

std::size_t TransformParam::parameter_count() const {
  if (mode == TransformMode::identity) return 0;
  if (mode == TransformMode::diagonal) return a.rows();
  return a.size() + b.size();
}

double TransformParam::check_invertible() const {
  if (mode == TransformMode::identity) return 1.0;
  const Tensor m = matrix();
  if (!m.all_finite()) throw ParameterError("transform has non-finite entries");
  const double cond = condition_number(m);
  if (!(cond <= kMaxConditionNumber))
    throw ParameterError("transform condition number " + std::to_string(cond) + " exceeds 1e8");
  return cond;
}

// --------------------------------------------------------------- scheme

const TransformParam& GroupScheme::transform(std::size_t t) const {
  if (per_loop.empty()) return *shared;
  return per_loop[std::min(t, per_loop.size() - 1)];
}

const Tensor& GroupScheme::scale(std::size_t t) const {
  if (loop_scales.empty()) return shared_scale;
  return loop_scales[std::min(t, loop_scales.size() - 1)];
}

QuantScheme QuantScheme::make(const ModelConfig& config, const QuantSpec& spec) {
  config.validate();
  spec.check_model(config);
  QuantScheme s;
  s.spec = spec;
  s.loops = config.loops;
  for (const GroupId& id : transform_groups(config)) {
    GroupScheme g;
    g.id = id;
    g.in_dim = group_input_dim(config, id.kind);
    g.shared = TransformParam::identity(g.in_dim);
    g.shared_scale = Tensor::full(1, g.in_dim / spec.group_size, 1.0);
    s.groups.push_back(std::move(g));
  }
  return s;
}

std::size_t QuantScheme::index_of(const GroupId& id) const {
  for (std::size_t i = 0; i < groups.size(); ++i)
    if (groups[i].id == id) return i;
  throw ContractError("no quantization group " + id.name());
}

GroupScheme& QuantScheme::group(const GroupId& id) { return groups[index_of(id)]; }
const GroupScheme& QuantScheme::group(const GroupId& id) const { return groups[index_of(id)]; }

void QuantScheme::validate(const ModelConfig& config) const {
  spec.check_model(config);
  const auto ids = transform_groups(config);
  if (ids.size() != groups.size()) throw ContractError("scheme group count does not match the model");
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const GroupScheme& g = groups[i];
    if (!(g.id == ids[i])) throw ContractError("scheme group order does not match the model");
    if (g.shared.has_value() == g.transform_untied())
      throw ContractError(g.id.name() + ": transform must be exactly one of shared or loop-dependent");
    if (g.shared_scale.empty() == g.loop_scales.empty())
      throw ContractError(g.id.name() + ": scale must be exactly one of shared or loop-dependent");
    if (g.transform_untied() && g.per_loop.size() != loops)
      throw ContractError(g.id.name() + ": loop-dependent transforms must number T");
    if (g.scales_per_loop() && g.loop_scales.size() != loops)
      throw ContractError(g.id.name() + ": loop-dependent scales must number T");
    const std::size_t ng = g.in_dim / spec.group_size;
    auto check_scale = [&](const Tensor& c) {
      if (c.rank() != 2 || c.rows() != 1 || c.cols() != ng) throw DimensionError(g.id.name() + ": bad scale shape");
      for (double v : c.data())
        if (!(v > 0.0) || !std::isfinite(v)) throw ParameterError(g.id.name() + ": scales must be positive");
    };
    if (g.scales_per_loop())
      for (const Tensor& c : g.loop_scales) check_scale(c);
    else
      check_scale(g.shared_scale);
    auto check_p = [&](const TransformParam& p) {
      if (p.dim() != g.in_dim) throw DimensionError(g.id.name() + ": transform size does not match the group");
      p.check_invertible();
    };
    if (g.transform_untied())
      for (const auto& p : g.per_loop) check_p(p);
    else
      check_p(*g.shared);
  }
}

std::size_t QuantScheme::transform_parameter_count() const {
  std::size_t n = 0;
  for (const auto& g : groups) {
    if (g.transform_untied())
      for (const auto& p : g.per_loop) n += p.parameter_count();
    else
      n += g.shared->parameter_count();
  }
  return n;
}

std::size_t QuantScheme::loop_dependent_transform_parameters() const {
  std::size_t n = 0;
  for (const auto& g : groups)
    if (g.transform_untied())
      for (std::size_t t = 1; t < g.per_loop.size(); ++t) n += g.per_loop[t].parameter_count();
  return n;
}

std::size_t QuantScheme::scale_count() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.scales_per_loop() ? g.loop_scales.size() * g.loop_scales[0].size() : g.shared_scale.size();
  return n;
}

void untie_group(GroupScheme& group, std::size_t loops) {
  if (loops == 0) throw ContractError("untie_group: T must be positive");
  if (!group.transform_untied()) {
    group.per_loop.assign(loops, *group.shared);
    group.shared.reset();
  }
  if (!group.scales_per_loop()) {
    group.loop_scales.assign(loops, group.shared_scale);
    group.shared_scale = Tensor();
  }
}

// --------------------------------------------------------------- statistics

namespace {

class RecordingLinear final : public GroupLinear {
 public:
  explicit RecordingLinear(ActivationRecord& rec) : rec_(rec) {}
  std::size_t loop = 0;

  std::vector<Node> apply(std::size_t group_index, const Node& x, std::span<const Node> weights) override {
    auto& slot = rec_.inputs.at(group_index).at(loop);
    const Tensor& v = x.value();
    if (slot.empty()) {
      slot = v;
    } else {
      std::vector<double> data(slot.values());
      data.insert(data.end(), v.data().begin(), v.data().end());
      slot = Tensor({slot.rows() + v.rows(), v.cols()}, std::move(data));
    }
    return FullPrecisionLinear().apply(group_index, x, weights);
  }

 private:
  ActivationRecord& rec_;
};

}  // namespace

ActivationRecord record_group_inputs(const LoopedModel& model, std::span<const TokenBatch> batches) {
  if (batches.empty()) throw ContractError("activation statistics need at least one batch");
  const ModelConfig& cfg = model.config;
  ActivationRecord rec;
  rec.inputs.assign(transform_groups(cfg).size(), std::vector<Tensor>(cfg.loops));
  const ModelNodes nodes = ModelNodes::constants(model);
  RecordingLinear lin(rec);
  for (const TokenBatch& batch : batches) {
    batch.validate(cfg.vocab);
    Node h = embed_tokens(nodes, batch);
    for (std::size_t t = 0; t < cfg.loops; ++t) {
      lin.loop = t;
      for (std::size_t l = 0; l < cfg.layers; ++l) h = run_layer(cfg, nodes, l, h, batch.seq_len, lin);
    }
  }
  return rec;
}

Tensor group_ranges(const Tensor& x, const TransformParam& p, std::size_t group_size, RangeRule rule) {
  const Tensor y = p.mode == TransformMode::identity ? x : matmul(x, p.matrix());
  const std::size_t cols = y.cols(), ng = cols / group_size;
  Tensor out({1, ng});
  std::vector<double> buf;
  for (std::size_t k = 0; k < ng; ++k) {
    buf.clear();
    for (std::size_t r = 0; r < y.rows(); ++r)
      for (std::size_t j = k * group_size; j < (k + 1) * group_size; ++j) buf.push_back(std::abs(y(r, j)));
    if (buf.empty()) continue;
    if (rule == RangeRule::absmax) {
      out[k] = *std::max_element(buf.begin(), buf.end());
    } else {
      const auto rank = static_cast<std::size_t>(std::ceil(0.999 * static_cast<double>(buf.size()))) - 1;
      std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(rank), buf.end());
      out[k] = buf[rank];
    }
  }
  return out;
}

void calibrate_static_scales(QuantScheme& scheme, const ActivationRecord& record, RangeRule rule) {
  if (record.inputs.size() != scheme.groups.size()) throw ContractError("activation record does not match the scheme");
  const std::size_t gs = scheme.spec.group_size;
  const double qmax = scheme.spec.bits_a > 0 ? qmax_for(scheme.spec.bits_a) : 1.0;
  auto to_scale = [&](Tensor range) {
    for (double& v : range.data()) v = std::max(v / qmax, kActScaleFloor);
    return range;
  };
  for (std::size_t gi = 0; gi < scheme.groups.size(); ++gi) {
    GroupScheme& g = scheme.groups[gi];
    const auto& per_loop = record.inputs[gi];
    if (per_loop.empty() || per_loop[0].empty()) throw ContractError("activation record is empty");
    std::vector<Tensor> ranges;
    for (std::size_t t = 0; t < per_loop.size(); ++t)
      ranges.push_back(group_ranges(per_loop[t], g.transform(t), gs, rule));
    if (g.scales_per_loop()) {
      for (std::size_t t = 0; t < g.loop_scales.size(); ++t)
        g.loop_scales[t] = to_scale(ranges[std::min(t, ranges.size() - 1)]);
    } else {
      Tensor all = ranges[0];
      if (rule == RangeRule::absmax) {
        for (const Tensor& r : ranges)
          for (std::size_t k = 0; k < all.size(); ++k) all[k] = std::max(all[k], r[k]);
      } else {
        std::vector<double> data;
        for (const Tensor& x : per_loop) data.insert(data.end(), x.data().begin(), x.data().end());
        const std::size_t cols = per_loop[0].cols();
        const std::size_t rows = data.size() / cols;
        all = group_ranges(Tensor({rows, cols}, std::move(data)), *g.shared, gs, rule);
      }
      g.shared_scale = to_scale(all);
    }
  }
}

}  // namespace loopq
