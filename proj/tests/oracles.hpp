#pragma once

// Brute-force reference implementations, kept deliberately independent of the
// library code paths they check: plain per-pixel/per-member loops in double.

#include <torch/torch.h>

#include <cmath>
#include <vector>

#include "nowcast/data.hpp"
#include "nowcast/losses.hpp"

namespace oracles {

inline double weight_of(double rate, const nowcast::ClassWeightTable& table) {
  for (std::size_t i = 0; i < table.thresholds.size(); ++i)
    if (rate <= table.thresholds[i]) return table.weights[i];
  return table.weights.back();
}

inline double inverse_of(double y, const nowcast::NormalizationSpec& spec) {
  return std::max(std::exp(y * (spec.minmax_hi - spec.minmax_lo) + spec.minmax_lo) - spec.log_offset,
                  0.0);
}

// Per-pixel loop: mean of w(x_phys) * ((p - t)^2 + beta * |p - t|).
inline double cb_loss_oracle(const torch::Tensor& pred, const torch::Tensor& target, double beta,
                             const nowcast::NormalizationSpec& spec,
                             const nowcast::ClassWeightTable& table = {}) {
  auto p = pred.reshape({-1}).to(torch::kFloat64);
  auto t = target.reshape({-1}).to(torch::kFloat64);
  double total = 0.0;
  for (std::int64_t i = 0; i < p.size(0); ++i) {
    const double pi = p[i].item<double>(), ti = t[i].item<double>();
    const double w = weight_of(inverse_of(ti, spec), table);
    const double d = pi - ti;
    total += w * (d * d + beta * std::abs(d));
  }
  return total / static_cast<double>(p.size(0));
}

// Double-sum empirical CRPS, mean over pixels.
inline double crps_oracle(const torch::Tensor& members, const torch::Tensor& obs) {
  auto m = members.reshape({members.size(0), -1}).to(torch::kFloat64);
  auto y = obs.reshape({-1}).to(torch::kFloat64);
  const auto x = m.size(0), n = y.size(0);
  double total = 0.0;
  for (std::int64_t px = 0; px < n; ++px) {
    double skill = 0.0;
    for (std::int64_t i = 0; i < x; ++i)
      skill += std::abs(m[i][px].item<double>() - y[px].item<double>());
    skill /= static_cast<double>(x);
    double spread = 0.0;
    for (std::int64_t i = 0; i < x; ++i)
      for (std::int64_t j = 0; j < x; ++j)
        spread += std::abs(m[i][px].item<double>() - m[j][px].item<double>());
    spread /= 2.0 * static_cast<double>(x) * static_cast<double>(x);
    total += skill - spread;
  }
  return total / static_cast<double>(n);
}

// Mean unbiased per-pixel ensemble std over the RMSE of the ensemble mean.
// Returns NaN for the undefined zero-skill/nonzero-spread case.
inline double ssr_oracle(const torch::Tensor& members, const torch::Tensor& obs) {
  auto m = members.reshape({members.size(0), -1}).to(torch::kFloat64);
  auto y = obs.reshape({-1}).to(torch::kFloat64);
  const auto x = m.size(0), n = y.size(0);
  double spread = 0.0;
  double sq_err = 0.0;
  for (std::int64_t px = 0; px < n; ++px) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < x; ++i) mean += m[i][px].item<double>();
    mean /= static_cast<double>(x);
    if (x > 1) {
      double var = 0.0;
      for (std::int64_t i = 0; i < x; ++i) {
        const double d = m[i][px].item<double>() - mean;
        var += d * d;
      }
      spread += std::sqrt(var / static_cast<double>(x - 1));
    }
    const double e = mean - y[px].item<double>();
    sq_err += e * e;
  }
  spread /= static_cast<double>(n);
  if (spread == 0.0) return 0.0;
  const double rmse = std::sqrt(sq_err / static_cast<double>(n));
  if (rmse == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return spread / rmse;
}

}  // namespace oracles
