#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loopq/analysis.hpp"
#include "loopq/calibrate.hpp"
#include "loopq/methods.hpp"
#include "loopq/model.hpp"
#include "loopq/quant.hpp"
#include "loopq/quant_forward.hpp"

namespace loopq {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

// --------------------------------------------------------------- checkpoints

inline constexpr std::string_view kCheckpointMagic = "LOOPQLAB";
inline constexpr std::uint8_t kCheckpointVersion = 1;

/// Everything a CLI stage hands to the next one. The scheme is absent for a
/// full-precision checkpoint.
struct Checkpoint {
  LoopedModel model;
  std::optional<QuantScheme> scheme;
  TransitionAdapters adapters;
  std::uint64_t seed = 0;
  nlohmann::json meta = nlohmann::json::object();  // free-form provenance
};

/// Layout: magic, version byte, u64 header length, JSON header, then every
/// tensor as little-endian IEEE-754 doubles in header order. A pretty-printed
/// copy of the header is written next to the file as `<path>.json`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Hash of the tensor payload only (independent of the free-form meta).
std::string checkpoint_tensor_hash(const Checkpoint& ckpt);

// --------------------------------------------------------------- CSV

struct CsvSchema {
  std::string_view name;
  int version;
  std::vector<std::string_view> columns;
};

const CsvSchema& trajectory_schema();   // t,layer,rel_err,eps_t,eps_quant,gamma
const CsvSchema& calibration_schema();  // per-step loss terms
const CsvSchema& drift_schema();
const CsvSchema& sharing_gap_schema();
const CsvSchema& sweep_schema();
const CsvSchema& pretrain_schema();
std::vector<const CsvSchema*> all_csv_schemas();

/// Writes a header and rows with a fixed column count. Doubles use 17
/// significant digits so a re-read reproduces them.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const CsvSchema& schema);
  void row(const std::vector<std::string>& cells);
  static std::string cell(double v);
  static std::string cell(std::size_t v);

 private:
  std::ofstream out_;
  std::size_t columns_;
};

/// Throws IoError unless the file's header equals the schema's columns and
/// every row has that many cells.
void check_csv(const std::filesystem::path& path, const CsvSchema& schema);
/// Looks the schema up by header; throws IoError if none matches.
const CsvSchema& check_csv_any(const std::filesystem::path& path);

/// Rows over all eval batches; `batch` is implicit in row order (batch-major).
void write_trajectory_csv(const std::filesystem::path& path, const std::vector<ErrorTrajectory>& trajs);
void write_calibration_csv(const std::filesystem::path& path, const CalibrationReport& report);
void write_drift_csv(const std::filesystem::path& path, const DriftStats& stats);
void write_sharing_gap_csv(const std::filesystem::path& path, const std::vector<SharingGapReport>& rounds);
void write_pretrain_csv(const std::filesystem::path& path, const PretrainReport& report);

nlohmann::json calibration_json(const CalibrationReport& report);
nlohmann::json sharing_gap_json(const SelectionResult& selection, const QuantScheme& scheme);
nlohmann::json trajectory_json(const ErrorTrajectory& traj);

/// Writes JSON with sorted keys and fixed formatting so equal content gives
/// equal bytes.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace loopq
