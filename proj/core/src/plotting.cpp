#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "commands_internal.hpp"
#include "nowcast/metrics.hpp"

#ifdef NOWCAST_HAVE_OPENCV
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#endif

namespace nowcast {

std::pair<int, int> panel_grid_dims(int n_models, int n_hourly_leads) {
  // One truth row above the model rows; one initial-condition column before
  // the lead columns.
  return {1 + n_models, 1 + n_hourly_leads};
}

#ifdef NOWCAST_HAVE_OPENCV

namespace {

namespace fs = std::filesystem;

// White -> blue -> green -> yellow -> red rain ramp (BGR).
cv::Vec3b rain_color(double t) {
  struct Stop {
    double t;
    double b, g, r;
  };
  static const Stop stops[] = {{0.00, 255, 255, 255}, {0.08, 255, 208, 170},
                               {0.25, 255, 128, 0},   {0.45, 64, 192, 0},
                               {0.65, 0, 224, 224},   {0.85, 0, 128, 255},
                               {1.00, 32, 16, 208}};
  t = std::clamp(t, 0.0, 1.0);
  for (std::size_t i = 1; i < std::size(stops); ++i) {
    if (t <= stops[i].t) {
      const auto& a = stops[i - 1];
      const auto& b = stops[i];
      const double u = (t - a.t) / (b.t - a.t);
      return {static_cast<unsigned char>(a.b + u * (b.b - a.b)),
              static_cast<unsigned char>(a.g + u * (b.g - a.g)),
              static_cast<unsigned char>(a.r + u * (b.r - a.r))};
    }
  }
  return {32, 16, 208};
}

// frame: (C, H, W) normalized; rendered in physical mm/h against vmax.
cv::Mat render_frame(const torch::Tensor& frame, const NormalizationSpec& spec, double vmax) {
  auto phys = inverse_transform(frame.squeeze(0), spec).to(torch::kFloat32).contiguous();
  const int h = static_cast<int>(phys.size(0)), w = static_cast<int>(phys.size(1));
  cv::Mat img(h, w, CV_8UC3);
  auto acc = phys.accessor<float, 2>();
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      img.at<cv::Vec3b>(r, c) = rain_color(vmax > 0 ? acc[r][c] / vmax : 0.0);
  return img;
}

constexpr int kMargin = 24;  // label strip, pixels
constexpr int kGap = 2;

void put_label(cv::Mat& canvas, const std::string& text, int x, int y) {
  cv::putText(canvas, text, {x, y}, cv::FONT_HERSHEY_SIMPLEX, 0.35, {0, 0, 0}, 1, cv::LINE_8);
}

// Simple polyline chart of per-lead values, one series per model.
cv::Mat render_curves(const std::string& title, const std::vector<int>& leads,
                      const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const int w = 420, h = 300, left = 50, bottom = 40, top = 28, right = 120;
  cv::Mat img(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  double lo = 0.0, hi = 1e-9;
  for (const auto& [name, values] : series)
    for (double v : values) hi = std::max(hi, v);
  hi *= 1.05;

  const int plot_w = w - left - right, plot_h = h - top - bottom;
  auto px = [&](std::size_t i) {
    return left + static_cast<int>(plot_w * (leads.size() > 1 ? double(i) / (leads.size() - 1) : 0.5));
  };
  auto py = [&](double v) { return top + plot_h - static_cast<int>(plot_h * (v - lo) / (hi - lo)); };

  cv::rectangle(img, {left, top}, {left + plot_w, top + plot_h}, {0, 0, 0});
  static const cv::Scalar palette[] = {{208, 16, 32}, {32, 128, 0}, {0, 96, 224},
                                       {160, 0, 160}, {0, 0, 0}};
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& values = series[s].second;
    for (std::size_t i = 1; i < values.size(); ++i)
      cv::line(img, {px(i - 1), py(values[i - 1])}, {px(i), py(values[i])},
               palette[s % std::size(palette)], 1, cv::LINE_8);
    put_label(img, series[s].first, left + plot_w + 6,
              top + 14 + 14 * static_cast<int>(s));
    cv::line(img, {left + plot_w + 60, top + 10 + 14 * static_cast<int>(s) - 4},
             {left + plot_w + 112, top + 10 + 14 * static_cast<int>(s) - 4},
             palette[s % std::size(palette)], 1);
  }
  put_label(img, title, left, 16);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", hi / 1.05);
  put_label(img, buf, 4, top + 10);
  put_label(img, "0", 4, top + plot_h);
  for (std::size_t i = 0; i < leads.size(); i += 2)
    put_label(img, std::to_string(leads[i]), px(i) - 8, h - bottom + 16);
  put_label(img, "lead [min]", left + plot_w / 2 - 20, h - 8);
  return img;
}

void write_png(const fs::path& path, const cv::Mat& img) {
  if (!cv::imwrite(path.string(), img))
    throw std::runtime_error("cannot write image " + path.string());
}

}  // namespace

int cmd_plot(const ExperimentConfig& cfg, const std::vector<std::string>& models,
             std::ostream& out) {
  if (models.empty()) throw std::invalid_argument("cmd_plot: no models requested");
  auto run_dir = cfg.resolve(cfg.eval.output_dir);
  auto reports_dir = run_dir / "reports";
  auto figures_dir = run_dir / "figures";
  fs::create_directories(figures_dir);

  auto ds = detail::load_split(cfg, "test");
  auto seq = ds.sequence(0);
  const int h = seq.horizon();
  detail::ModelSet model_set(cfg, ds.spec.fingerprint());

  // Hourly undersampling: keep leads at whole hours.
  std::vector<int> hourly;  // target-frame indices (1-based)
  for (int k = 1; k <= h; ++k)
    if ((k * kFrameIntervalSeconds) % 3600 == 0) hourly.push_back(k);

  // Truth row first, then one row per model; initial condition leads each row.
  std::vector<std::pair<std::string, torch::Tensor>> grid_rows;
  grid_rows.emplace_back("truth", seq.frames.slice(0, seq.context, seq.context + h));
  for (const auto& tag : models) grid_rows.emplace_back(tag, model_set.frames(tag, seq));

  double vmax = 1e-9;
  auto x0_phys_max = inverse_transform(seq.x0(), ds.spec).max().item<double>();
  vmax = std::max(vmax, x0_phys_max);
  for (const auto& [tag, frames] : grid_rows)
    vmax = std::max(vmax, inverse_transform(frames, ds.spec).max().item<double>());

  const auto [n_rows, n_cols] = panel_grid_dims(static_cast<int>(models.size()),
                                                static_cast<int>(hourly.size()));
  const int fh = static_cast<int>(seq.x0().size(1)), fw = static_cast<int>(seq.x0().size(2));
  cv::Mat canvas(kMargin + n_rows * (fh + kGap), kMargin + n_cols * (fw + kGap), CV_8UC3,
                 cv::Scalar(255, 255, 255));
  auto blit = [&](int row, int col, const cv::Mat& cell) {
    cell.copyTo(canvas(cv::Rect(kMargin + col * (fw + kGap), kMargin + row * (fh + kGap), fw, fh)));
  };
  for (int row = 0; row < n_rows; ++row) {
    blit(row, 0, render_frame(seq.x0(), ds.spec, vmax));  // shared initial condition column
    for (int col = 1; col < n_cols; ++col) {
      const int lead = hourly[col - 1];
      blit(row, col, render_frame(grid_rows[row].second[lead - 1], ds.spec, vmax));
    }
    put_label(canvas, grid_rows[row].first.substr(0, 3), 2,
              kMargin + row * (fh + kGap) + fh / 2);
  }
  put_label(canvas, "t+0", kMargin + fw / 2 - 10, 14);
  for (int col = 1; col < n_cols; ++col)
    put_label(canvas, "+" + std::to_string(hourly[col - 1] * 30) + "m",
              kMargin + col * (fw + kGap) + fw / 2 - 16, 14);

  auto panel_path = figures_dir / "panel.png";
  write_png(panel_path, canvas);
  out << "figure: " << panel_path.string() << "\n";

  // Degradation curves from the evaluation reports.
  std::vector<std::pair<std::string, std::vector<double>>> lpips_series, csi_series;
  std::vector<int> leads;
  for (const auto& tag : models) {
    auto path = reports_dir / (tag + ".json");
    if (!fs::exists(path))
      throw std::runtime_error("missing report " + path.string() + "; run evaluate first");
    std::ifstream f(path);
    auto report = MetricReport::from_json(nlohmann::json::parse(f));
    leads = report.lead_minutes;
    std::vector<double> lp, cs;
    for (const auto& scores : report.per_lead) {
      lp.push_back(scores.lpips);
      cs.push_back(scores.csi.empty() || !scores.csi[0] ? 0.0 : *scores.csi[0]);
    }
    lpips_series.emplace_back(tag, lp);
    csi_series.emplace_back(tag, cs);
  }
  cv::Mat curves;
  cv::hconcat(render_curves("perceptual vs lead", leads, lpips_series),
              render_curves("CSI (lowest thr) vs lead", leads, csi_series), curves);
  auto curves_path = figures_dir / "degradation.png";
  write_png(curves_path, curves);
  out << "figure: " << curves_path.string() << "\n";
  return 0;
}

#else  // !NOWCAST_HAVE_OPENCV

int cmd_plot(const ExperimentConfig&, const std::vector<std::string>&, std::ostream&) {
  throw std::runtime_error("nowcast was built without OpenCV; the plot subcommand is unavailable");
}

#endif

}  // namespace nowcast
