#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nowcast/data.hpp"
#include "nowcast/losses.hpp"
#include "nowcast/networks.hpp"

namespace nowcast {

inline constexpr const char* kVersion = "0.1.0";

struct DataConfig {
  std::string granule_dir;             // ingest input
  std::string dataset_dir = "data";    // container output/lookup, under the data root
  GranuleLayout layout;
  std::vector<CropBox> boxes = {{0, 0}};
  double clip_max = 100.0;
  int horizon = 8;
  int stride = 1;
  int context = 4;                     // superset window: baselines read 4, DYffusion 1
  double split_train = 0.8, split_val = 0.1, split_test = 0.1;
  SyntheticConfig synthetic;

  NormalizationSpec normalization() const { return NormalizationSpec::analytic(clip_max); }
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 8;
  double learning_rate = 2e-4;
  std::uint64_t seed = 0;
  int checkpoint_every = 5;  // epochs
  std::string resume_from;   // optional checkpoint path
};

struct EvalConfig {
  int members = 10;                              // ensemble size X
  std::vector<double> thresholds = {2, 10, 18};  // mm/h
  std::string output_dir = "runs";
  std::uint64_t perceptual_seed = RandomConvExtractor::kDefaultSeed;
};

struct ExperimentConfig {
  DataConfig data;
  LcbConfig lcb;
  CompositeLossConfig composite;
  ClassWeightTable class_weights;
  UNetConfig interpolator_net;
  UNetConfig forecastor_net;
  ConvLSTMConfig convlstm;
  TrainConfig train;
  EvalConfig eval;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);

  /// "synth": 64x64 synthetic desk preset. "full": paper-scale 128x128.
  static ExperimentConfig preset(const std::string& name);

  /// Preset defaults (if any), then the config file (if any), then overrides.
  static ExperimentConfig load(const std::optional<std::filesystem::path>& config_path,
                               const std::optional<std::string>& preset_name,
                               std::optional<std::uint64_t> seed_override = std::nullopt);

  /// Stable content hash; embedded in checkpoints and manifests.
  std::string hash() const;

  /// eval.output_dir / data.dataset_dir resolved against the data root
  /// (NOWCAST_DATA_ROOT env var when set, else the current directory).
  std::filesystem::path resolve(const std::string& rel) const;
};

/// Immutable record of one subcommand invocation.
struct RunManifest {
  std::string config_hash;
  std::string code_version = kVersion;
  std::string stage;
  std::vector<std::string> checkpoints;
  std::vector<std::string> reports;
  std::map<std::string, double> timings_s;

  nlohmann::json to_json() const;
  /// Refuses to overwrite an existing manifest.
  void write(const std::filesystem::path& path) const;
  static RunManifest read(const std::filesystem::path& path);
};

/// Exclusive ownership of an output directory for the lifetime of a command.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::filesystem::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  std::filesystem::path lockfile_;
};

}  // namespace nowcast
