#include "loopq/experiment.hpp"

#include <algorithm>
#include <set>

#include "loopq/data.hpp"
#include "loopq/errors.hpp"

namespace loopq {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> keys, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& item : obj.items())
    if (!allowed.count(item.key())) throw ConfigError("unknown key '" + item.key() + "' in " + where);
}

template <typename T>
void read(const json& obj, const char* key, T& out) {
  if (auto it = obj.find(key); it != obj.end()) out = it->get<T>();
}

void read_data(const json& obj, DataConfig& d, const std::string& where) {
  reject_unknown(obj, {"samples", "seq_len", "batch_size"}, where);
  read(obj, "samples", d.samples);
  read(obj, "seq_len", d.seq_len);
  read(obj, "batch_size", d.batch_size);
}

json data_json(const DataConfig& d) {
  return {{"samples", d.samples}, {"seq_len", d.seq_len}, {"batch_size", d.batch_size}};
}

void check_data(const DataConfig& d, const ModelConfig& m, const std::string& where) {
  if (d.samples == 0 || d.seq_len == 0 || d.batch_size == 0) throw ConfigError(where + ": sizes must be positive");
  if (d.seq_len > m.max_seq) throw ConfigError(where + ": seq_len exceeds model max_seq");
}

}  // namespace

const char* range_rule_name(RangeRule r) { return r == RangeRule::absmax ? "absmax" : "p99.9"; }

RangeRule parse_range_rule(const std::string& s) {
  if (s == "absmax") return RangeRule::absmax;
  if (s == "p99.9") return RangeRule::p999;
  throw ConfigError("unknown range rule '" + s + "'");
}

ModelConfig model_config_from_json(const json& m) {
  ModelConfig c;
  try {
    reject_unknown(m, {"vocab", "d", "heads", "ffn", "layers", "loops", "max_seq", "norm_eps", "init_std", "kind"},
                   "model");
    read(m, "vocab", c.vocab);
    read(m, "d", c.d);
    read(m, "heads", c.heads);
    read(m, "ffn", c.ffn);
    read(m, "layers", c.layers);
    read(m, "loops", c.loops);
    read(m, "max_seq", c.max_seq);
    read(m, "norm_eps", c.norm_eps);
    read(m, "init_std", c.init_std);
    if (auto k = m.find("kind"); k != m.end()) {
      const auto s = k->get<std::string>();
      if (s == "block") c.kind = LayerKind::block;
      else if (s == "linear") c.kind = LayerKind::linear;
      else throw ConfigError("model.kind must be 'block' or 'linear'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

json model_config_to_json(const ModelConfig& m) {
  return {{"vocab", m.vocab},     {"d", m.d},
          {"heads", m.heads},     {"ffn", m.ffn},
          {"layers", m.layers},   {"loops", m.loops},
          {"max_seq", m.max_seq}, {"norm_eps", m.norm_eps},
          {"init_std", m.init_std}, {"kind", m.kind == LayerKind::block ? "block" : "linear"}};
}

void ExperimentConfig::validate() const {
  model.validate();
  quant.check_model(model);
  loss.validate();
  check_data(calib, model, "calibration");
  check_data(eval, model, "eval");
  if (pretrain.steps > 0) check_data(pretrain.data, model, "pretrain");
  const bool baseline = method.arm != "loopq";
  if (baseline) parse_baseline(method.arm);
  if (method.cta_rank == 0 || method.cta_rank > model.d) throw ConfigError("cta_rank must be in [1, d]");
  const std::size_t groups = transform_groups(model).size();
  if (method.slt && method.slt_budget > groups)
    throw ConfigError("slt_budget " + std::to_string(method.slt_budget) + " exceeds the " + std::to_string(groups) +
                      " transform groups");
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  try {
    reject_unknown(j, {"seed", "model", "pretrain", "quant", "method", "calibration", "eval", "output_dir"}, "config");
    read(j, "seed", c.seed);
    read(j, "output_dir", c.output_dir);
    if (auto it = j.find("model"); it != j.end()) c.model = model_config_from_json(*it);
    if (auto it = j.find("pretrain"); it != j.end()) {
      reject_unknown(*it, {"steps", "lr", "samples", "seq_len", "batch_size"}, "pretrain");
      read(*it, "steps", c.pretrain.steps);
      read(*it, "lr", c.pretrain.lr);
      json d = *it;
      d.erase("steps");
      d.erase("lr");
      read_data(d, c.pretrain.data, "pretrain");
    }
    if (auto it = j.find("quant"); it != j.end()) {
      reject_unknown(*it, {"bits_w", "bits_a", "group_size"}, "quant");
      read(*it, "bits_w", c.quant.bits_w);
      read(*it, "bits_a", c.quant.bits_a);
      read(*it, "group_size", c.quant.group_size);
    }
    if (auto it = j.find("method"); it != j.end()) {
      reject_unknown(*it, {"arm", "las", "slt", "cta", "slt_budget", "slt_rounds", "slt_refine_steps", "cta_rank",
                           "kronecker", "range_rule"},
                     "method");
      MethodConfig& m = c.method;
      read(*it, "arm", m.arm);
      read(*it, "las", m.las);
      read(*it, "slt", m.slt);
      read(*it, "cta", m.cta);
      read(*it, "slt_budget", m.slt_budget);
      read(*it, "slt_rounds", m.slt_rounds);
      read(*it, "slt_refine_steps", m.slt_refine_steps);
      read(*it, "cta_rank", m.cta_rank);
      read(*it, "kronecker", m.kronecker);
      if (auto r = it->find("range_rule"); r != it->end()) m.range_rule = parse_range_rule(r->get<std::string>());
    }
    if (auto it = j.find("calibration"); it != j.end()) {
      reject_unknown(*it, {"samples", "seq_len", "batch_size", "steps", "lambda", "kl_temperature", "teacher_topk",
                           "mu_update_interval", "mu_eps", "adaptive_mu", "mean_norms", "lr_scale", "lr_transform",
                           "lr_adapter", "clip_norm"},
                     "calibration");
      const json& k = *it;
      read(k, "samples", c.calib.samples);
      read(k, "seq_len", c.calib.seq_len);
      read(k, "batch_size", c.calib.batch_size);
      read(k, "steps", c.optim.steps);
      read(k, "lambda", c.loss.lambda);
      read(k, "kl_temperature", c.loss.kl_temperature);
      read(k, "teacher_topk", c.loss.teacher_topk);
      read(k, "mu_update_interval", c.loss.mu_update_interval);
      read(k, "mu_eps", c.loss.mu_eps);
      read(k, "adaptive_mu", c.loss.adaptive_mu);
      read(k, "mean_norms", c.loss.mean_norms);
      read(k, "lr_scale", c.optim.lr_scale);
      read(k, "lr_transform", c.optim.lr_transform);
      read(k, "lr_adapter", c.optim.lr_adapter);
      read(k, "clip_norm", c.optim.clip_norm);
    }
    if (auto it = j.find("eval"); it != j.end()) read_data(*it, c.eval, "eval");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json pre = data_json(c.pretrain.data);
  pre["steps"] = c.pretrain.steps;
  pre["lr"] = c.pretrain.lr;
  json cal = data_json(c.calib);
  cal.update({{"steps", c.optim.steps},
              {"lambda", c.loss.lambda},
              {"kl_temperature", c.loss.kl_temperature},
              {"teacher_topk", c.loss.teacher_topk},
              {"mu_update_interval", c.loss.mu_update_interval},
              {"mu_eps", c.loss.mu_eps},
              {"adaptive_mu", c.loss.adaptive_mu},
              {"mean_norms", c.loss.mean_norms},
              {"lr_scale", c.optim.lr_scale},
              {"lr_transform", c.optim.lr_transform},
              {"lr_adapter", c.optim.lr_adapter},
              {"clip_norm", c.optim.clip_norm}});
  return {{"seed", c.seed},
          {"model", model_config_to_json(c.model)},
          {"pretrain", pre},
          {"quant", {{"bits_w", c.quant.bits_w}, {"bits_a", c.quant.bits_a}, {"group_size", c.quant.group_size}}},
          {"method",
           {{"arm", c.method.arm},
            {"las", c.method.las},
            {"slt", c.method.slt},
            {"cta", c.method.cta},
            {"slt_budget", c.method.slt_budget},
            {"slt_rounds", c.method.slt_rounds},
            {"slt_refine_steps", c.method.slt_refine_steps},
            {"cta_rank", c.method.cta_rank},
            {"kronecker", c.method.kronecker},
            {"range_rule", range_rule_name(c.method.range_rule)}}},
          {"calibration", cal},
          {"eval", data_json(c.eval)},
          {"output_dir", c.output_dir}};
}

std::vector<TokenBatch> pretrain_batches(const ExperimentConfig& cfg) {
  const DataConfig& d = cfg.pretrain.data;
  return make_batches(cfg.model.vocab, d.samples, d.seq_len, d.batch_size, cfg.seed, cfg.seed * 3 + 1);
}

std::vector<TokenBatch> calibration_batches(const ExperimentConfig& cfg) {
  const DataConfig& d = cfg.calib;
  return make_batches(cfg.model.vocab, d.samples, d.seq_len, d.batch_size, cfg.seed, cfg.seed * 3 + 2);
}

std::vector<TokenBatch> eval_batches(const ExperimentConfig& cfg) {
  const DataConfig& d = cfg.eval;
  return make_batches(cfg.model.vocab, d.samples, d.seq_len, d.batch_size, cfg.seed, cfg.seed * 3 + 3);
}

LoopedModel build_model(const ExperimentConfig& cfg, PretrainReport* report) {
  LoopedModel model = init_model(cfg.model, cfg.seed);
  if (cfg.pretrain.steps > 0) {
    const auto batches = pretrain_batches(cfg);
    PretrainReport r = pretrain(model, batches, cfg.pretrain.steps, cfg.pretrain.lr);
    if (report) *report = std::move(r);
  }
  return model;
}

QuantizeResult run_quantize(const LoopedModel& model, const ExperimentConfig& cfg) {
  cfg.validate();
  if (model.config.d != cfg.model.d || model.config.loops != cfg.model.loops || model.config.layers != cfg.model.layers)
    throw ConfigError("checkpoint model does not match the config's model section");
  const ModelConfig& mc = model.config;
  cfg.quant.check_model(mc);
  const MethodConfig& m = cfg.method;
  QuantizeResult out;

  const auto batches = calibration_batches(cfg);
  const ActivationRecord record = record_group_inputs(model, batches);

  if (m.arm != "loopq") {
    const BaselineKind kind = parse_baseline(m.arm);
    BaselineContext ctx;
    ctx.record = &record;
    ctx.seed = cfg.seed;
    ctx.kronecker = m.kronecker;
    ctx.rule = m.range_rule;
    ctx.loss = cfg.loss;
    ctx.optim = cfg.optim;
    TeacherSet teacher;
    if (kind == BaselineKind::learned_affine) {
      teacher = make_teacher(model, batches);
      ctx.teacher = &teacher;
    }
    out.scheme = apply_baseline(kind, model, cfg.quant, ctx, &out.calibration);
    out.calibrated = kind == BaselineKind::learned_affine;
    out.scheme.validate(mc);
    return out;
  }

  // Shared affine transforms at identity and static shared scales: with every
  // toggle off this is exactly the learned_affine baseline.
  out.scheme = QuantScheme::make(mc, cfg.quant);
  for (GroupScheme& g : out.scheme.groups) g.shared = TransformParam::affine(g.in_dim, m.kronecker);
  calibrate_static_scales(out.scheme, record, m.range_rule);
  if (m.las) out.las_scalars = enable_las(out.scheme, record, m.range_rule);

  const TeacherSet teacher = make_teacher(model, batches);
  if (m.slt && m.slt_budget > 0) {
    SelectionConfig sel;
    sel.budget = m.slt_budget;
    sel.rounds = m.slt_rounds;
    sel.refine_steps = m.slt_refine_steps;
    sel.refine = cfg.optim;
    sel.refine.train = {true, true, false, {}};
    out.selection = select_loop_dependent(model, out.scheme, out.adapters, teacher, cfg.loss, sel);
  }
  if (m.cta) out.adapters = TransitionAdapters::identity(mc.d, mc.loops, m.cta_rank, cfg.seed + 17);

  OptimConfig opt = cfg.optim;
  opt.train = {true, true, m.cta, {}};
  out.calibration = run_calibration(model, out.scheme, out.adapters, teacher, cfg.loss, opt);
  out.calibrated = true;
  out.adapted_transform_fraction = adapted_transform_fraction(out.scheme);
  out.scheme.validate(mc);
  return out;
}

EvalResult evaluate(const LoopedModel& model, const QuantScheme& scheme, const TransitionAdapters& adapters,
                    std::span<const TokenBatch> batches, std::size_t loops) {
  if (batches.empty()) throw ContractError("evaluation needs at least one batch");
  EvalResult r;
  for (const TokenBatch& b : batches) {
    r.batches.push_back(measure_error_trajectory(model, scheme, adapters, b, loops));
    r.final_rel_err += r.batches.back().final_loop_rel_err();
  }
  r.final_rel_err /= static_cast<double>(batches.size());
  return r;
}

}  // namespace loopq
