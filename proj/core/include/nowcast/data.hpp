#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace nowcast {

/// Half-hourly cadence of the IMERG Early Run product.
inline constexpr std::int64_t kFrameIntervalSeconds = 30 * 60;

/// Side length of the cropped grid boxes.
inline constexpr std::int64_t kGridBoxSize = 128;

struct BoundingBox {
  double lat_min = 0.0;
  double lon_min = 0.0;
  double lat_max = 0.0;
  double lon_max = 0.0;
};

/// A single precipitation grid in physical units (mm/h).
struct RainField {
  torch::Tensor values;        // (H, W) float32, all >= 0
  std::int64_t timestamp = 0;  // seconds since the Unix epoch, UTC
  BoundingBox bbox;
};

/// The invertible preprocessing chain: clip -> log1p -> min-max.
///
/// Constants are analytic (lo = 0, hi = log(1 + clip_max)) so the inverse is
/// exact and train/test pipelines cannot drift apart.
struct NormalizationSpec {
  double clip_max = 100.0;  // mm/h
  double log_offset = 1.0;  // fixed: the transform is log(1 + x)
  double minmax_lo = 0.0;
  double minmax_hi = 4.61512051684126;  // log(1 + 100)

  static NormalizationSpec analytic(double clip_max = 100.0);

  void validate() const;
  /// Stable content hash, embedded in checkpoints and dataset sidecars.
  std::string fingerprint() const;

  nlohmann::json to_json() const;
  static NormalizationSpec from_json(const nlohmann::json& j);
};

/// Map physical rain rates (mm/h, >= 0) into [0, 1] model space.
torch::Tensor forward_transform(const torch::Tensor& x, const NormalizationSpec& spec);
double forward_transform(double x, const NormalizationSpec& spec);

/// Map normalized values back to mm/h. Inputs may exceed [0, 1] by no more
/// than kNormalizedInputTolerance; the result is clipped below at 0.
torch::Tensor inverse_transform(const torch::Tensor& y, const NormalizationSpec& spec);
double inverse_transform(double y, const NormalizationSpec& spec);

inline constexpr double kNormalizedInputTolerance = 1e-5;

/// A windowed training/evaluation sample: `context` conditioning frames
/// followed by `horizon` target frames, normalized to [0, 1].
///
/// Frame layout: [c_0 .. c_{context-1} = x0, target_1 .. target_h].
struct RainSequence {
  torch::Tensor frames;         // (S, C, H, W) float32 in [0,1], S = context + horizon
  std::int64_t start_time = 0;  // timestamp of frames[0]
  int context = 1;
  NormalizationSpec spec;

  int horizon() const { return static_cast<int>(frames.size(0)) - context; }
  /// Index of the initial condition x0 (the last context frame).
  int x0_index() const { return context - 1; }
  torch::Tensor x0() const { return frames[x0_index()]; }
  /// Target frame k, k in [1, horizon].
  torch::Tensor target(int k) const { return frames[x0_index() + k]; }
};

/// How precipitation, coordinates and time are laid out inside a granule.
/// Defaults match the IMERG V07B HDF5 layout, where the grid is stored
/// (time, lon, lat) and needs transposing to (lat, lon).
struct GranuleLayout {
  std::string precipitation_path = "Grid/precipitation";
  std::string lat_path = "Grid/lat";
  std::string lon_path = "Grid/lon";
  std::string time_path = "Grid/time";  // seconds since the Unix epoch
  bool transpose = true;
};

/// Read one granule. Negative sentinel values (e.g. -9999.9) become 0 mm/h;
/// non-finite values after replacement are an error.
RainField read_granule(const std::filesystem::path& path, const GranuleLayout& layout = {});

/// Write a granule in the same layout read_granule expects. Used for fixture
/// construction and ingestion round-trip checks.
void write_granule(const std::filesystem::path& path, const RainField& field,
                   const GranuleLayout& layout = {});

/// Top-left corner of a kGridBoxSize x kGridBoxSize crop, in grid indices.
struct CropBox {
  std::int64_t row = 0;
  std::int64_t col = 0;
};

/// Extract 128x128 boxes from a larger field. Values are copied unchanged.
std::vector<RainField> crop_boxes(const RainField& field, const std::vector<CropBox>& boxes);

/// Window a time-ordered frame list into sequences of `context + horizon`
/// frames at 30-minute cadence, normalizing with `spec`. Windows containing a
/// time gap are skipped. Throws if fewer than context + horizon frames exist.
std::vector<RainSequence> window_sequences(const std::vector<RainField>& frames,
                                           const NormalizationSpec& spec, int horizon = 8,
                                           int stride = 1, int context = 1);

/// Number of cadence breaks in a time-ordered frame list.
int count_gaps(const std::vector<RainField>& frames);

/// Desk-scale synthetic dataset: gaussian rain blobs advected by a constant
/// velocity with multiplicative growth. Deterministic in the seed.
struct SyntheticConfig {
  std::uint64_t seed = 0;
  int n_sequences = 32;
  int n_blobs = 3;
  std::array<double, 2> advection_velocity = {1.0, 0.0};  // (x = cols, y = rows) pixels/frame
  double growth_rate = 0.0;  // fractional intensity change per frame
  int size = 64;             // grid H = W
  int horizon = 8;
  int context = 4;
  NormalizationSpec spec{};

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticConfig from_json(const nlohmann::json& j);
};

std::vector<RainSequence> synth_advection(const SyntheticConfig& cfg);

/// The on-disk dataset: one (N, S, C, H, W) array container plus a JSON
/// sidecar holding the NormalizationSpec and per-frame timestamps.
struct SequenceDataset {
  torch::Tensor sequences;   // (N, S, C, H, W) float32 in [0,1]
  torch::Tensor timestamps;  // (N, S) int64
  int context = 1;
  NormalizationSpec spec;

  std::int64_t size() const { return sequences.size(0); }
  int horizon() const { return static_cast<int>(sequences.size(1)) - context; }
  RainSequence sequence(std::int64_t i) const;

  static SequenceDataset from_sequences(const std::vector<RainSequence>& seqs);
  /// Chronological split by start time; fractions must sum to ~1.
  std::array<SequenceDataset, 3> split(double train, double val, double test) const;
};

/// Writes `<path>` (raw array container) and `<path>.json` (sidecar).
/// Byte-identical for identical inputs.
void save_dataset(const std::filesystem::path& path, const SequenceDataset& ds);
SequenceDataset load_dataset(const std::filesystem::path& path);

}  // namespace nowcast
