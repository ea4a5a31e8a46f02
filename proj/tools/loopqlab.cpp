// loopqlab: generate, quantize, analyze, verify, sweep and report on looped toy models.

#include <CLI11.hpp>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <json.hpp>

#include "loopq/analysis.hpp"
#include "loopq/errors.hpp"
#include "loopq/experiment.hpp"
#include "loopq/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace loopq;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitVerification = 3;

/// Config fields that may be overridden from the command line. Unset options
/// leave the JSON untouched.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> loops, layers, d, calib_samples, steps, budget;
  std::optional<int> bits_w, bits_a;
  std::optional<std::string> arm;
  std::vector<std::string> disable;  // las, slt, cta

  void add_to(CLI::App* app) {
    app->add_option("--seed", seed, "Experiment seed");
    app->add_option("--loops", loops, "Loop count T");
    app->add_option("--layers", layers, "Layers per loop L");
    app->add_option("--d", d, "Hidden width");
    app->add_option("--bits-w", bits_w, "Weight bits (0 disables)");
    app->add_option("--bits-a", bits_a, "Activation bits (0 disables)");
    app->add_option("--arm", arm, "loopq, symmetric, smooth_scale, rotation or learned_affine");
    app->add_option("--calib-samples", calib_samples, "Calibration sequences");
    app->add_option("--steps", steps, "Calibration steps");
    app->add_option("--budget", budget, "Loop-dependent transform budget");
    app->add_option("--disable", disable, "Drop loopq components")->check(CLI::IsMember({"las", "slt", "cta"}));
  }

  void apply(json& j) const {
    if (seed) j["seed"] = *seed;
    if (loops) j["model"]["loops"] = *loops;
    if (layers) j["model"]["layers"] = *layers;
    if (d) j["model"]["d"] = *d;
    if (bits_w) j["quant"]["bits_w"] = *bits_w;
    if (bits_a) j["quant"]["bits_a"] = *bits_a;
    if (arm) j["method"]["arm"] = *arm;
    if (calib_samples) j["calibration"]["samples"] = *calib_samples;
    if (steps) j["calibration"]["steps"] = *steps;
    if (budget) j["method"]["slt_budget"] = *budget;
    for (const auto& c : disable) j["method"][c] = false;
  }
};

struct Common {
  std::string config_path;
  std::string out;
  Overrides over;

  void add_to(CLI::App* app, bool needs_config = true) {
    auto* opt = app->add_option("--config", config_path, "Experiment config JSON");
    if (needs_config) opt->check(CLI::ExistingFile);
    app->add_option("--out", out, "Output directory (default: $LOOPQLAB_OUT/<subcommand> or runs/<subcommand>)");
    over.add_to(app);
  }

  json raw_config() const {
    json j = config_path.empty() ? json::object() : read_json(config_path);
    over.apply(j);
    return j;
  }
  ExperimentConfig config() const { return config_from_json(raw_config()); }

  fs::path out_dir(const std::string& sub, const ExperimentConfig* cfg = nullptr) const {
    if (!out.empty()) return out;
    if (cfg && !cfg->output_dir.empty()) return cfg->output_dir;
    const char* root = std::getenv("LOOPQLAB_OUT");
    return fs::path(root && *root ? root : "runs") / sub;
  }
};

using Clock = std::chrono::steady_clock;

/// Manifest plus a separate timing file; wall times never enter report hashes.
void finish_run(const fs::path& dir, const std::string& command, const json& config, std::uint64_t seed,
                const std::map<std::string, fs::path>& inputs, Clock::time_point start) {
  json in = json::object();
  for (const auto& [k, p] : inputs) in[k] = {{"path", p.string()}, {"sha256", sha256_file(p)}};
  json out = json::object();
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (!e.is_regular_file() || name == "manifest.json" || name == "timing.json") continue;
    out[name] = sha256_file(e.path());
  }
  json schemas = json::object();
  for (const CsvSchema* s : all_csv_schemas()) schemas[std::string(s->name)] = s->version;
  const std::string cfg_text = config.dump();
  write_json(dir / "manifest.json", {{"command", command},
                                     {"config", config},
                                     {"config_sha256", sha256_hex(cfg_text)},
                                     {"content_sha256", sha256_hex(out.dump())},
                                     {"seed", seed},
                                     {"inputs", in},
                                     {"outputs", out},
                                     {"csv_schemas", schemas},
                                     {"checkpoint_format_version", kCheckpointVersion}});
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  write_json(dir / "timing.json", {{"command", command}, {"wall_seconds", secs}});
  std::cout << command << ": wrote " << dir.string() << " (" << secs << " s)\n";
}

// --------------------------------------------------------------- subcommands

int cmd_generate(const Common& c) {
  const auto start = Clock::now();
  const ExperimentConfig cfg = c.config();
  const fs::path dir = c.out_dir("generate", &cfg);
  fs::create_directories(dir);
  PretrainReport pre;
  Checkpoint ck;
  ck.model = build_model(cfg, &pre);
  ck.seed = cfg.seed;
  ck.meta = {{"stage", "generate"}, {"config", config_to_json(cfg)}};
  save_checkpoint(dir / "model.ckpt", ck);
  if (!pre.losses.empty()) write_pretrain_csv(dir / "pretrain.csv", pre);
  write_json(dir / "report.json", {{"weights_sha256", checkpoint_tensor_hash(ck)},
                                   {"parameters", ck.model.parameter_count()},
                                   {"pretrain_steps", pre.losses.size()},
                                   {"pretrain_final_loss", pre.losses.empty() ? 0.0 : pre.losses.back()}});
  finish_run(dir, "generate", config_to_json(cfg), cfg.seed, {}, start);
  return 0;
}

json quantize_report(const QuantizeResult& q, const ExperimentConfig& cfg) {
  json r = {{"arm", cfg.method.arm},
            {"calibrated", q.calibrated},
            {"las_scalars", q.las_scalars},
            {"adapted_transform_fraction", q.adapted_transform_fraction},
            {"transform_parameters", q.scheme.transform_parameter_count()},
            {"scale_parameters", q.scheme.scale_count()},
            {"adapter_parameters", q.adapters.parameter_count()}};
  if (q.calibrated) r["calibration"] = calibration_json(q.calibration);
  if (!q.selection.selected.empty()) r["selection"] = sharing_gap_json(q.selection, q.scheme);
  return r;
}

int cmd_quantize(const Common& c, const std::string& checkpoint) {
  const auto start = Clock::now();
  const ExperimentConfig cfg = c.config();
  const fs::path dir = c.out_dir("quantize", &cfg);
  fs::create_directories(dir);
  Checkpoint ck = load_checkpoint(checkpoint);
  if (ck.scheme) throw ConfigError(checkpoint + " is already quantized");
  const QuantizeResult q = run_quantize(ck.model, cfg);
  ck.scheme = q.scheme;
  ck.adapters = q.adapters;
  ck.meta = {{"stage", "quantize"}, {"config", config_to_json(cfg)}, {"source_seed", ck.seed}};
  ck.seed = cfg.seed;
  save_checkpoint(dir / "quantized.ckpt", ck);
  if (q.calibrated) write_calibration_csv(dir / "calibration.csv", q.calibration);
  if (!q.selection.rounds.empty()) write_sharing_gap_csv(dir / "sharing_gap.csv", q.selection.rounds);
  write_json(dir / "report.json", quantize_report(q, cfg));
  finish_run(dir, "quantize", config_to_json(cfg), cfg.seed, {{"checkpoint", checkpoint}}, start);
  return 0;
}

int cmd_analyze(const Common& c, const std::string& fp_path, const std::string& q_path) {
  const auto start = Clock::now();
  const ExperimentConfig cfg = c.config();
  const fs::path dir = c.out_dir("analyze", &cfg);
  fs::create_directories(dir);
  const Checkpoint fp = load_checkpoint(fp_path);
  const Checkpoint q = load_checkpoint(q_path);
  if (!q.scheme) throw ConfigError(q_path + " carries no quantization scheme");
  Checkpoint bare = q;
  bare.scheme.reset();
  bare.adapters = fp.adapters;
  if (checkpoint_tensor_hash(bare) != checkpoint_tensor_hash(fp))
    throw ConfigError("quantized checkpoint was not derived from " + fp_path);

  ExperimentConfig data_cfg = cfg;
  data_cfg.model = fp.model.config;
  const auto batches = eval_batches(data_cfg);
  const EvalResult ev = evaluate(fp.model, *q.scheme, q.adapters, batches);
  write_trajectory_csv(dir / "trajectory.csv", ev.batches);
  const DriftStats drift = drift_stats(fp.model, batches.front());
  write_drift_csv(dir / "drift.csv", drift);
  json bounds = json::array();
  bool all_hold = true;
  for (const ErrorTrajectory& tr : ev.batches) {
    const Prop2Report p = verify_prop2(tr, false);
    all_hold = all_hold && p.one_step_holds && p.unrolled_holds;
    bounds.push_back({{"one_step_holds", p.one_step_holds},
                      {"unrolled_holds", p.unrolled_holds},
                      {"eps_final", p.eps_final},
                      {"unrolled_bound", p.unrolled_bound},
                      {"worst_slack", p.worst_slack}});
  }
  write_json(dir / "report.json", {{"final_rel_err", ev.final_rel_err},
                                   {"batches", ev.batches.size()},
                                   {"error_bounds_hold", all_hold},
                                   {"error_bounds", bounds},
                                   {"first_batch", trajectory_json(ev.batches.front())}});
  finish_run(dir, "analyze", config_to_json(cfg), cfg.seed, {{"fp", fp_path}, {"quantized", q_path}}, start);
  return 0;
}

int cmd_verify(const Common& c, const std::vector<int>& props, std::size_t seeds) {
  const auto start = Clock::now();
  const ExperimentConfig cfg = c.config();
  const fs::path dir = c.out_dir("verify", &cfg);
  fs::create_directories(dir);
  json verdict = json::object();
  bool ok = true;
  for (int prop : props) {
    if (prop == 1) {
      const Prop1ScaleReport s = verify_prop1_scale({});
      const Prop1CovReport v = verify_prop1_covariance({});
      const bool pass = s.margin >= 5 * s.std_error && s.margin > 0 && v.margin >= 5 * v.std_error && v.margin > 0;
      verdict["scale_drift"] = {{"margin", s.margin}, {"std_error", s.std_error}, {"c_shared", s.c_shared}};
      verdict["covariance_drift"] = {{"margin", v.margin}, {"std_error", v.std_error}};
      verdict["prop1_pass"] = pass;
      ok = ok && pass;
    } else if (prop == 2) {
      json runs = json::array();
      bool pass = true;
      for (std::size_t s = 0; s < seeds; ++s) {
        ExperimentConfig sc = cfg;
        sc.seed = cfg.seed + s;
        const LoopedModel model = build_model(sc);
        const QuantizeResult q = run_quantize(model, sc);
        for (const TokenBatch& b : eval_batches(sc)) {
          const Prop2Report r = verify_prop2(measure_error_trajectory(model, q.scheme, q.adapters, b), false);
          pass = pass && r.one_step_holds && r.unrolled_holds;
          runs.push_back({{"seed", sc.seed}, {"worst_slack", r.worst_slack}, {"eps_final", r.eps_final},
                          {"unrolled_bound", r.unrolled_bound}});
        }
      }
      verdict["prop2_runs"] = runs;
      verdict["prop2_pass"] = pass;
      ok = ok && pass;
    } else {
      throw ConfigError("unknown property " + std::to_string(prop));
    }
  }
  verdict["pass"] = ok;
  write_json(dir / "verdict.json", verdict);
  finish_run(dir, "verify", config_to_json(cfg), cfg.seed, {}, start);
  if (!ok) throw VerificationFailure("verification failed; see " + (dir / "verdict.json").string());
  return 0;
}

int cmd_sweep(const Common& c, const std::string& axis, const std::vector<std::size_t>& values,
              const std::vector<std::string>& arms) {
  const auto start = Clock::now();
  const ExperimentConfig base = c.config();
  const fs::path dir = c.out_dir("sweep", &base);
  fs::create_directories(dir);
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const LoopedModel model = build_model(base);
  const auto eval = eval_batches(base);
  CsvWriter w(dir / "sweep.csv", sweep_schema());
  for (const std::string& arm : arms.empty() ? std::vector<std::string>{base.method.arm} : arms) {
    ExperimentConfig cfg = base;
    cfg.method.arm = arm;
    std::optional<QuantizeResult> fixed;
    for (std::size_t v : values) {
      double err = 0;
      if (axis == "loops") {
        // Extrapolates the calibrated scheme; loop-dependent state past T reuses the last index.
        if (!fixed) fixed = run_quantize(model, cfg);
        err = evaluate(model, fixed->scheme, fixed->adapters, eval, v).final_rel_err;
        w.row({axis, CsvWriter::cell(v), arm, CsvWriter::cell(static_cast<std::size_t>(cfg.seed)),
               CsvWriter::cell(err), CsvWriter::cell(fixed->calibration.final.total)});
        continue;
      }
      ExperimentConfig vc = cfg;
      if (axis == "calib_size") vc.calib.samples = v;
      else if (axis == "budget") vc.method.slt_budget = v;
      else throw ConfigError("sweep axis must be loops, calib_size or budget");
      vc.validate();
      const QuantizeResult q = run_quantize(model, vc);
      err = evaluate(model, q.scheme, q.adapters, eval).final_rel_err;
      w.row({axis, CsvWriter::cell(v), arm, CsvWriter::cell(static_cast<std::size_t>(cfg.seed)),
             CsvWriter::cell(err), CsvWriter::cell(q.calibration.final.total)});
    }
  }
  finish_run(dir, "sweep", config_to_json(base), base.seed, {}, start);
  return 0;
}

int cmd_report(const std::string& dir_arg) {
  const fs::path dir(dir_arg);
  if (!fs::is_directory(dir)) throw ConfigError(dir_arg + " is not a directory");
  json files = json::object();
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  std::size_t csvs = 0;
  for (const fs::path& p : paths) {
    const std::string rel = fs::relative(p, dir).generic_string();
    if (p.filename() == "timing.json" || p.filename() == "summary.json") continue;
    json entry = {{"sha256", sha256_file(p)}};
    if (p.extension() == ".csv") {
      entry["schema"] = std::string(check_csv_any(p).name);
      ++csvs;
    }
    files[rel] = entry;
  }
  write_json(dir / "summary.json", {{"files", files}, {"csv_files", csvs}});
  std::cout << "report: " << files.size() << " files, " << csvs << " CSV files conform\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantization lab for looped language models"};
  app.require_subcommand(1);

  Common gen, quant, ana, ver, swp;
  auto* g = app.add_subcommand("generate", "Build (and optionally pretrain) a toy model checkpoint");
  gen.add_to(g);

  std::string ckpt;
  auto* q = app.add_subcommand("quantize", "Quantize and calibrate a checkpoint");
  quant.add_to(q);
  q->add_option("--checkpoint", ckpt, "Full-precision checkpoint")->required()->check(CLI::ExistingFile);

  std::string fp_path, q_path;
  auto* a = app.add_subcommand("analyze", "Error trajectories and drift statistics");
  ana.add_to(a);
  a->add_option("--fp", fp_path, "Full-precision checkpoint")->required()->check(CLI::ExistingFile);
  a->add_option("--quantized", q_path, "Quantized checkpoint")->required()->check(CLI::ExistingFile);

  std::vector<int> props{1, 2};
  std::size_t seeds = 3;
  auto* v = app.add_subcommand("verify", "Check the drift and error-propagation properties");
  ver.add_to(v);
  v->add_option("--prop", props, "Properties to check (1, 2)")->delimiter(',');
  v->add_option("--seeds", seeds, "Seeds for the propagation check");

  std::string axis;
  std::vector<std::size_t> values;
  std::vector<std::string> arms;
  auto* s = app.add_subcommand("sweep", "Sweep loops, calibration size or budget");
  swp.add_to(s);
  s->add_option("--axis", axis, "loops, calib_size or budget")->required();
  s->add_option("--values", values, "Axis values")->required()->delimiter(',');
  s->add_option("--arms", arms, "Arms to compare (default: the config's arm)")->delimiter(',');

  std::string report_dir;
  auto* r = app.add_subcommand("report", "Check CSV schemas and hash every file of a run directory");
  r->add_option("dir", report_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*g) return cmd_generate(gen);
    if (*q) return cmd_quantize(quant, ckpt);
    if (*a) return cmd_analyze(ana, fp_path, q_path);
    if (*v) return cmd_verify(ver, props, seeds);
    if (*s) return cmd_sweep(swp, axis, values, arms);
    if (*r) return cmd_report(report_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failed: " << e.what() << '\n';
    return kExitVerification;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
