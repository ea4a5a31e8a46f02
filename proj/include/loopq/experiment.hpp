#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "loopq/analysis.hpp"
#include "loopq/calibrate.hpp"
#include "loopq/methods.hpp"
#include "loopq/model.hpp"
#include "loopq/quant.hpp"

namespace loopq {

struct DataConfig {
  std::size_t samples = 128;  // sequences
  std::size_t seq_len = 16;
  std::size_t batch_size = 8;
};

struct PretrainConfig {
  std::size_t steps = 0;
  double lr = 3e-3;
  DataConfig data{256, 16, 8};
};

/// Experiment arm: a baseline name or "loopq" with component toggles.
struct MethodConfig {
  std::string arm = "loopq";
  bool las = true;
  bool slt = true;
  bool cta = true;
  std::size_t slt_budget = 1;
  std::size_t slt_rounds = 1;
  std::size_t slt_refine_steps = 20;
  std::size_t cta_rank = 8;
  bool kronecker = true;
  RangeRule range_rule = RangeRule::absmax;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  PretrainConfig pretrain;
  QuantSpec quant;
  MethodConfig method;
  DataConfig calib;
  CalibLossConfig loss;
  OptimConfig optim;
  DataConfig eval{16, 16, 16};
  std::string output_dir;

  void validate() const;  // throws ConfigError
};

/// Parses a config document. Missing fields keep their defaults; unknown keys
/// at any level are a ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);  // validates
nlohmann::json model_config_to_json(const ModelConfig& cfg);
const char* range_rule_name(RangeRule rule);
RangeRule parse_range_rule(const std::string& name);

/// Data splits share one token chain keyed by the experiment seed and differ
/// only in their stream seeds.
std::vector<TokenBatch> pretrain_batches(const ExperimentConfig& cfg);
std::vector<TokenBatch> calibration_batches(const ExperimentConfig& cfg);
std::vector<TokenBatch> eval_batches(const ExperimentConfig& cfg);

/// Initialises the model and runs the optional pretraining.
LoopedModel build_model(const ExperimentConfig& cfg, PretrainReport* report = nullptr);

struct QuantizeResult {
  QuantScheme scheme;
  TransitionAdapters adapters;
  bool calibrated = false;
  CalibrationReport calibration;
  SelectionResult selection;
  std::size_t las_scalars = 0;
  double adapted_transform_fraction = 0;
};

/// Pipeline: static scales, then LAS, SLT rounds, CTA attach and trajectory
/// calibration for the loopq arm; the baseline arms build their own scheme.
QuantizeResult run_quantize(const LoopedModel& model, const ExperimentConfig& cfg);

struct EvalResult {
  double final_rel_err = 0;  // mean over eval batches
  std::vector<ErrorTrajectory> batches;
};

EvalResult evaluate(const LoopedModel& model, const QuantScheme& scheme, const TransitionAdapters& adapters,
                    std::span<const TokenBatch> batches, std::size_t loops = 0);

}  // namespace loopq
