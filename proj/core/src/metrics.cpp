#include "nowcast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace nowcast {

ContingencyCounts contingency(const torch::Tensor& pred, const torch::Tensor& target,
                              double threshold_mm_h, const NormalizationSpec& spec) {
  if (threshold_mm_h < 0.0) throw std::invalid_argument("contingency: negative threshold");
  if (!pred.sizes().equals(target.sizes()))
    throw std::invalid_argument("contingency: shape mismatch");
  auto pred_hit = inverse_transform(pred, spec) >= threshold_mm_h;
  auto target_hit = inverse_transform(target, spec) >= threshold_mm_h;
  ContingencyCounts c;
  c.hits = (pred_hit & target_hit).sum().item<std::int64_t>();
  c.misses = ((~pred_hit) & target_hit).sum().item<std::int64_t>();
  c.false_alarms = (pred_hit & (~target_hit)).sum().item<std::int64_t>();
  c.correct_negatives = ((~pred_hit) & (~target_hit)).sum().item<std::int64_t>();
  return c;
}

double mse(const torch::Tensor& pred, const torch::Tensor& target) {
  if (!pred.sizes().equals(target.sizes())) throw std::invalid_argument("mse: shape mismatch");
  return (pred - target).pow(2).mean().item<double>();
}

std::optional<double> csi(const torch::Tensor& pred, const torch::Tensor& target,
                          double threshold_mm_h, const NormalizationSpec& spec) {
  auto c = contingency(pred, target, threshold_mm_h, spec);
  const auto denom = c.hits + c.misses + c.false_alarms;
  if (denom == 0) return std::nullopt;
  return static_cast<double>(c.hits) / static_cast<double>(denom);
}

double crps_ensemble(const torch::Tensor& members, const torch::Tensor& obs, bool fair) {
  TORCH_CHECK(members.defined() && members.size(0) >= 1, "crps_ensemble: empty ensemble");
  TORCH_CHECK(members.sizes().slice(1).equals(obs.sizes()), "crps_ensemble: shape mismatch");
  const auto x = members.size(0);
  auto skill = (members - obs.unsqueeze(0)).abs().mean(0);  // (1/X) sum_i |x_i - y|
  torch::Tensor spread;
  if (x == 1 || (fair && x < 2)) {
    spread = torch::zeros_like(skill);
  } else {
    auto pairwise = (members.unsqueeze(0) - members.unsqueeze(1)).abs().sum({0, 1});
    const double denom = fair ? 2.0 * x * (x - 1) : 2.0 * static_cast<double>(x) * x;
    spread = pairwise / denom;
  }
  return (skill - spread).mean().item<double>();
}

std::optional<double> ssr(const torch::Tensor& members, const torch::Tensor& obs) {
  TORCH_CHECK(members.defined() && members.size(0) >= 1, "ssr: empty ensemble");
  TORCH_CHECK(members.sizes().slice(1).equals(obs.sizes()), "ssr: shape mismatch");
  const auto x = members.size(0);
  double spread = 0.0;
  if (x > 1) spread = torch::std(members, /*dim=*/0, /*unbiased=*/true).mean().item<double>();
  if (spread == 0.0) return 0.0;  // deterministic ensemble, covers X = 1
  const double rmse = std::sqrt(mse(members.mean(0), obs));
  if (rmse == 0.0) return std::nullopt;  // nonzero spread over zero skill error: undefined
  return spread / rmse;
}

namespace {

std::string format_threshold(double t) {
  std::ostringstream os;
  os << t;  // trims trailing zeros: 2, 10, 18, 0.5
  return os.str();
}

nlohmann::json optional_to_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

nlohmann::json scores_to_json(const LeadScores& s, const std::vector<double>& thresholds) {
  nlohmann::json csi_j;
  for (std::size_t i = 0; i < thresholds.size(); ++i)
    csi_j[format_threshold(thresholds[i])] = optional_to_json(s.csi[i]);
  return {{"mse", s.mse},
          {"lpips", s.lpips},
          {"csi", csi_j},
          {"crps", optional_to_json(s.crps)},
          {"ssr", optional_to_json(s.ssr)}};
}

LeadScores scores_from_json(const nlohmann::json& j, const std::vector<double>& thresholds) {
  LeadScores s;
  s.mse = j.at("mse").get<double>();
  s.lpips = j.at("lpips").get<double>();
  for (double t : thresholds) s.csi.push_back(optional_from_json(j.at("csi").at(format_threshold(t))));
  s.crps = optional_from_json(j.at("crps"));
  s.ssr = optional_from_json(j.at("ssr"));
  return s;
}

/// Mean over present values, summed in sorted order (exactly permutation
/// invariant); nullopt when nothing is present.
std::optional<double> sorted_mean(std::vector<double> values) {
  if (values.empty()) return std::nullopt;
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

LeadScores average_scores(const std::vector<LeadScores>& all, std::size_t n_thresholds) {
  LeadScores avg;
  std::vector<double> mses, lpipss;
  std::vector<std::vector<double>> csis(n_thresholds);
  std::vector<double> crpss, ssrs;
  for (const auto& s : all) {
    mses.push_back(s.mse);
    lpipss.push_back(s.lpips);
    for (std::size_t i = 0; i < n_thresholds; ++i)
      if (s.csi[i]) csis[i].push_back(*s.csi[i]);
    if (s.crps) crpss.push_back(*s.crps);
    if (s.ssr) ssrs.push_back(*s.ssr);
  }
  avg.mse = sorted_mean(mses).value_or(0.0);
  avg.lpips = sorted_mean(lpipss).value_or(0.0);
  for (std::size_t i = 0; i < n_thresholds; ++i) avg.csi.push_back(sorted_mean(csis[i]));
  avg.crps = sorted_mean(crpss);
  avg.ssr = sorted_mean(ssrs);
  return avg;
}

LeadScores score_lead(const torch::Tensor& pred, const torch::Tensor& obs,
                      const std::optional<torch::Tensor>& members, const NormalizationSpec& spec,
                      const std::vector<double>& thresholds, const PerceptualExtractor& px) {
  LeadScores s;
  s.mse = mse(pred, obs);
  s.lpips = perceptual_distance(pred, obs, px).item<double>();
  for (double t : thresholds) s.csi.push_back(csi(pred, obs, t, spec));
  if (members) {
    s.crps = crps_ensemble(*members, obs);
    s.ssr = ssr(*members, obs);
  }
  return s;
}

MetricReport evaluate_frames(const std::optional<torch::Tensor>& members_5d,
                             const torch::Tensor& det_frames, double gen_seconds,
                             const RainSequence& truth, const NormalizationSpec& spec,
                             const std::vector<double>& thresholds,
                             const PerceptualExtractor& px) {
  const int h = truth.horizon();
  TORCH_CHECK(det_frames.size(0) == h, "evaluate_rollout: lead-time mismatch (forecast ",
              det_frames.size(0), " leads, truth ", h, ")");
  MetricReport report;
  report.thresholds = thresholds;
  report.sample_count = 1;
  report.wall_time_s = gen_seconds;
  for (int k = 1; k <= h; ++k) {
    report.lead_minutes.push_back(static_cast<int>(k * kFrameIntervalSeconds / 60));
    auto obs = truth.target(k);
    auto pred = det_frames[k - 1];
    std::optional<torch::Tensor> lead_members;
    if (members_5d) lead_members = members_5d->select(1, k - 1);
    report.per_lead.push_back(score_lead(pred, obs, lead_members, spec, thresholds, px));
  }
  report.averaged = average_scores(report.per_lead, thresholds.size());
  return report;
}

}  // namespace

MetricReport evaluate_rollout(const EnsembleForecast& forecast, const RainSequence& truth,
                              const NormalizationSpec& spec,
                              const std::vector<double>& thresholds,
                              const PerceptualExtractor& px) {
  TORCH_CHECK(static_cast<int>(forecast.lead_minutes.size()) == truth.horizon(),
              "evaluate_rollout: lead-time mismatch");
  return evaluate_frames(forecast.members, ensemble_mean(forecast), forecast.gen_seconds, truth,
                         spec, thresholds, px);
}

MetricReport evaluate_rollout(const BaselineForecast& forecast, const RainSequence& truth,
                              const NormalizationSpec& spec,
                              const std::vector<double>& thresholds,
                              const PerceptualExtractor& px) {
  return evaluate_frames(std::nullopt, forecast.frames, forecast.gen_seconds, truth, spec,
                         thresholds, px);
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json per_lead_j = nlohmann::json::array();
  for (std::size_t i = 0; i < per_lead.size(); ++i) {
    auto j = scores_to_json(per_lead[i], thresholds);
    j["lead_minutes"] = lead_minutes[i];
    per_lead_j.push_back(std::move(j));
  }
  // wall_time_s is deliberately absent: reports must be byte-identical across
  // reruns; timings live in the run manifest and the CSV.
  return {{"lead_minutes", lead_minutes},
          {"thresholds", thresholds},
          {"sample_count", sample_count},
          {"per_lead", per_lead_j},
          {"averaged", scores_to_json(averaged, thresholds)}};
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  r.lead_minutes = j.at("lead_minutes").get<std::vector<int>>();
  r.thresholds = j.at("thresholds").get<std::vector<double>>();
  r.sample_count = j.at("sample_count").get<std::int64_t>();
  for (const auto& lead : j.at("per_lead")) r.per_lead.push_back(scores_from_json(lead, r.thresholds));
  r.averaged = scores_from_json(j.at("averaged"), r.thresholds);
  return r;
}

void ReportAccumulator::add(const MetricReport& report) {
  if (!reports_.empty()) {
    if (report.lead_minutes != reports_.front().lead_minutes ||
        report.thresholds != reports_.front().thresholds)
      throw std::invalid_argument("ReportAccumulator: mismatched report layout");
  }
  reports_.push_back(report);
  count_ += report.sample_count;
}

MetricReport ReportAccumulator::mean() const {
  if (reports_.empty()) throw std::logic_error("ReportAccumulator: no reports");
  MetricReport out;
  out.lead_minutes = reports_.front().lead_minutes;
  out.thresholds = reports_.front().thresholds;
  out.sample_count = count_;
  const auto n_thresholds = out.thresholds.size();

  std::vector<double> times;
  for (const auto& r : reports_) times.push_back(r.wall_time_s);
  out.wall_time_s = sorted_mean(times).value_or(0.0);

  for (std::size_t lead = 0; lead < out.lead_minutes.size(); ++lead) {
    std::vector<LeadScores> at_lead;
    for (const auto& r : reports_) at_lead.push_back(r.per_lead[lead]);
    out.per_lead.push_back(average_scores(at_lead, n_thresholds));
  }
  out.averaged = average_scores(out.per_lead, n_thresholds);
  return out;
}

namespace {

std::string format_fixed(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

std::string format_optional(const std::optional<double>& v, int precision) {
  return v ? format_fixed(*v, precision) : "-";
}

}  // namespace

std::string results_csv_string(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  if (rows.empty()) throw std::invalid_argument("results_csv_string: no rows");
  const auto& thresholds = rows.front().second.thresholds;
  std::ostringstream os;
  os << "Model,MSE,LPIPS";
  for (double t : thresholds) os << ",CSI_" << format_threshold(t);
  os << ",CRPS,SSR,Time_s\n";
  for (const auto& [model, report] : rows) {
    if (report.thresholds != thresholds)
      throw std::invalid_argument("results_csv_string: mismatched thresholds between rows");
    const auto& avg = report.averaged;
    os << model << ',' << format_fixed(avg.mse, 4) << ',' << format_fixed(avg.lpips, 3);
    for (const auto& c : avg.csi) os << ',' << format_optional(c, 3);
    os << ',' << format_optional(avg.crps, 3) << ',' << format_optional(avg.ssr, 3) << ','
       << format_fixed(report.wall_time_s, 2) << '\n';
  }
  return os.str();
}

void write_results_csv(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("write_results_csv: cannot open " + path.string());
  f << results_csv_string(rows);
  if (!f) throw std::runtime_error("write_results_csv: write failed");
}

}  // namespace nowcast
