#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nowcast/baselines.hpp"
#include "nowcast/data.hpp"
#include "nowcast/dyffusion.hpp"
#include "nowcast/losses.hpp"

namespace nowcast {

struct ContingencyCounts {
  std::int64_t hits = 0;
  std::int64_t misses = 0;
  std::int64_t false_alarms = 0;
  std::int64_t correct_negatives = 0;

  std::int64_t total() const { return hits + misses + false_alarms + correct_negatives; }
};

/// Binarize both fields at a physical threshold (>= thr, in mm/h) and count.
ContingencyCounts contingency(const torch::Tensor& pred, const torch::Tensor& target,
                              double threshold_mm_h, const NormalizationSpec& spec);

/// Mean squared difference in normalized space.
double mse(const torch::Tensor& pred, const torch::Tensor& target);

/// CSI = hits / (hits + misses + false_alarms); nullopt when the denominator
/// is zero (excluded from averages rather than scored 0).
std::optional<double> csi(const torch::Tensor& pred, const torch::Tensor& target,
                          double threshold_mm_h, const NormalizationSpec& spec);

/// Pixel-wise empirical CRPS, mean over pixels:
///   (1/X) sum_i |x_i - y| - (1/(2X^2)) sum_ij |x_i - x_j|.
/// members: (X, ...) in normalized space. `fair` applies the X/(X-1)
/// correction to the spread term.
double crps_ensemble(const torch::Tensor& members, const torch::Tensor& obs, bool fair = false);

/// Spread-skill ratio: mean unbiased ensemble std over RMSE of the ensemble
/// mean. Zero spread -> 0 (covers X = 1); zero RMSE with nonzero spread is
/// undefined -> nullopt.
std::optional<double> ssr(const torch::Tensor& members, const torch::Tensor& obs);

/// Scores at one lead time. Absent CSI entries were denominator-zero; absent
/// CRPS/SSR mark a deterministic forecast (rendered "-" in the CSV).
struct LeadScores {
  double mse = 0.0;
  double lpips = 0.0;
  std::vector<std::optional<double>> csi;  // aligned with MetricReport::thresholds
  std::optional<double> crps;
  std::optional<double> ssr;
};

/// Per-lead-time scores plus the 4-hour (horizon) average.
struct MetricReport {
  std::vector<int> lead_minutes;
  std::vector<double> thresholds;  // mm/h, default {2, 10, 18}
  std::vector<LeadScores> per_lead;
  LeadScores averaged;
  std::int64_t sample_count = 0;
  double wall_time_s = 0.0;  // forecast generation time; reported in the CSV,
                             // not in the JSON (kept byte-reproducible)

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
};

inline const std::vector<double> kDefaultCsiThresholds = {2.0, 10.0, 18.0};

/// Score one ensemble forecast against one truth sequence: CRPS/SSR on the
/// members, MSE/CSI/perceptual on the ensemble mean.
MetricReport evaluate_rollout(const EnsembleForecast& forecast, const RainSequence& truth,
                              const NormalizationSpec& spec,
                              const std::vector<double>& thresholds = kDefaultCsiThresholds,
                              const PerceptualExtractor& px = default_perceptual_extractor());

/// Deterministic variant: CRPS/SSR are absent.
MetricReport evaluate_rollout(const BaselineForecast& forecast, const RainSequence& truth,
                              const NormalizationSpec& spec,
                              const std::vector<double>& thresholds = kDefaultCsiThresholds,
                              const PerceptualExtractor& px = default_perceptual_extractor());

/// Averages reports over samples. Values are summed in sorted order, so the
/// result is exactly permutation-invariant.
class ReportAccumulator {
 public:
  void add(const MetricReport& report);
  MetricReport mean() const;
  std::int64_t count() const { return count_; }

 private:
  std::vector<MetricReport> reports_;
  std::int64_t count_ = 0;
};

/// One CSV row per model in the Table-1 column order:
/// Model, MSE, LPIPS, CSI_t..., CRPS, SSR, Time_s. Deterministic models
/// render "-" in the CRPS/SSR columns.
void write_results_csv(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, MetricReport>>& rows);
std::string results_csv_string(const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace nowcast
