#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <vector>

#include <json.hpp>

#include "nowcast/data.hpp"

namespace nowcast {

/// The seven-band rainfall weight function. Band edges belong to the lower
/// band: x <= 0.5 -> 1, 0.5 < x <= 2 -> 2, ..., x > 30 -> 50.
struct ClassWeightTable {
  std::vector<double> thresholds = {0.5, 2.0, 6.0, 10.0, 18.0, 30.0};  // mm/h
  std::vector<double> weights = {1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0};

  void validate() const;
  nlohmann::json to_json() const;
  static ClassWeightTable from_json(const nlohmann::json& j);
};

/// Weight for a single physical rain rate (mm/h, >= 0).
double class_weight(double rate_mm_h, const ClassWeightTable& table = {});

/// Elementwise weight lookup. The result carries no gradient.
torch::Tensor class_weights(const torch::Tensor& rate_mm_h, const ClassWeightTable& table = {});

struct LcbConfig {
  double alpha = 0.6;  // perceptual/CB mix, in [0,1]
  double beta = 1.0;   // MAE scaling, >= 0

  void validate() const;
  nlohmann::json to_json() const;
  static LcbConfig from_json(const nlohmann::json& j);
};

struct CompositeLossConfig {
  double lambda1 = 0.5;        // forecast term
  double lambda2 = 0.5;        // one-step-ahead term
  int alpha_decay_epochs = 20;

  void validate() const;
  nlohmann::json to_json() const;
  static CompositeLossConfig from_json(const nlohmann::json& j);
};

/// Class-weighted MSE + MAE: mean over pixels of w(x_phys) * ((p-t)^2 + beta*|p-t|).
/// Weights come from the *target* converted to physical units and are treated
/// as constants of the target (no gradient through the lookup).
torch::Tensor cb_loss(const torch::Tensor& pred, const torch::Tensor& target,
                      const LcbConfig& cfg, const NormalizationSpec& spec,
                      const ClassWeightTable& table = {});

/// Pluggable multi-scale feature extractor behind the perceptual distance.
/// Implementations must be frozen and deterministic; a pretrained
/// LPIPS-compatible network is a drop-in alternative to the default.
class PerceptualExtractor {
 public:
  virtual ~PerceptualExtractor() = default;
  /// x: (B, 1, H, W) in [0,1]. Returns one feature map per scale.
  virtual std::vector<torch::Tensor> features(const torch::Tensor& x) const = 0;
};

/// Default desk-scale extractor: three stride-2 conv stages (widths 16/32/64)
/// with fixed seeded-random weights. Dependency-free and deterministic.
class RandomConvExtractor final : public PerceptualExtractor {
 public:
  explicit RandomConvExtractor(std::uint64_t seed = kDefaultSeed,
                               torch::Dtype dtype = torch::kFloat32);
  std::vector<torch::Tensor> features(const torch::Tensor& x) const override;

  static constexpr std::uint64_t kDefaultSeed = 0x70657263ULL;  // fixed project-wide

 private:
  std::vector<torch::Tensor> kernels_;
  std::vector<torch::Tensor> biases_;
};

/// Process-wide default extractor (float32, kDefaultSeed).
const PerceptualExtractor& default_perceptual_extractor();

/// Mean over scales of the spatially-averaged squared distance between
/// channel-unit-normalized feature maps. Zero on identical inputs, symmetric.
torch::Tensor perceptual_distance(const torch::Tensor& pred, const torch::Tensor& target,
                                  const PerceptualExtractor& extractor = default_perceptual_extractor());

/// LCB = (1 - alpha) * perceptual + alpha * CBLoss(beta).
torch::Tensor lcb_loss(const torch::Tensor& pred, const torch::Tensor& target,
                       const LcbConfig& cfg, const NormalizationSpec& spec,
                       const ClassWeightTable& table = {},
                       const PerceptualExtractor& extractor = default_perceptual_extractor());

/// Linear decay: max(0, 1 - epoch / alpha_decay_epochs).
double alpha_schedule(int epoch, const CompositeLossConfig& cfg);

/// alpha * L_initial + (1 - alpha) * (lambda1 * L_forecast + lambda2 * L_one_step).
torch::Tensor composite_loss(const torch::Tensor& l_initial, const torch::Tensor& l_forecast,
                             const torch::Tensor& l_one_step, int epoch,
                             const CompositeLossConfig& cfg);
double composite_loss(double l_initial, double l_forecast, double l_one_step, int epoch,
                      const CompositeLossConfig& cfg);

}  // namespace nowcast
