#include "nowcast/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace nowcast {

void ClassWeightTable::validate() const {
  if (weights.size() != thresholds.size() + 1)
    throw std::invalid_argument("ClassWeightTable: need len(weights) == len(thresholds) + 1");
  for (std::size_t i = 1; i < thresholds.size(); ++i)
    if (!(thresholds[i] > thresholds[i - 1]))
      throw std::invalid_argument("ClassWeightTable: thresholds must be strictly ascending");
  for (std::size_t i = 1; i < weights.size(); ++i)
    if (!(weights[i] > weights[i - 1]))
      throw std::invalid_argument("ClassWeightTable: weights must be strictly increasing");
}

nlohmann::json ClassWeightTable::to_json() const {
  return {{"thresholds", thresholds}, {"weights", weights}};
}

ClassWeightTable ClassWeightTable::from_json(const nlohmann::json& j) {
  ClassWeightTable t;
  if (j.contains("thresholds")) t.thresholds = j.at("thresholds").get<std::vector<double>>();
  if (j.contains("weights")) t.weights = j.at("weights").get<std::vector<double>>();
  t.validate();
  return t;
}

double class_weight(double rate_mm_h, const ClassWeightTable& table) {
  table.validate();
  if (rate_mm_h < 0.0) throw std::invalid_argument("class_weight: negative rain rate");
  for (std::size_t i = 0; i < table.thresholds.size(); ++i)
    if (rate_mm_h <= table.thresholds[i]) return table.weights[i];
  return table.weights.back();
}

torch::Tensor class_weights(const torch::Tensor& rate_mm_h, const ClassWeightTable& table) {
  table.validate();
  if (rate_mm_h.numel() > 0 && rate_mm_h.min().item<double>() < 0.0)
    throw std::invalid_argument("class_weights: negative rain rate");
  auto opts = torch::TensorOptions().dtype(rate_mm_h.scalar_type());
  auto edges = torch::tensor(table.thresholds, opts);
  auto values = torch::tensor(table.weights, opts);
  // right=false puts band edges into the lower band: x <= 0.5 -> w[0], ...
  auto band = torch::bucketize(rate_mm_h.detach(), edges, /*out_int32=*/false, /*right=*/false);
  return values.index_select(0, band.flatten()).view(band.sizes());
}

void LcbConfig::validate() const {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("LcbConfig: alpha must be in [0,1]");
  if (beta < 0.0) throw std::invalid_argument("LcbConfig: beta must be >= 0");
}

nlohmann::json LcbConfig::to_json() const { return {{"alpha", alpha}, {"beta", beta}}; }

LcbConfig LcbConfig::from_json(const nlohmann::json& j) {
  LcbConfig cfg;
  cfg.alpha = j.value("alpha", cfg.alpha);
  cfg.beta = j.value("beta", cfg.beta);
  cfg.validate();
  return cfg;
}

void CompositeLossConfig::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0)
    throw std::invalid_argument("CompositeLossConfig: lambdas must be >= 0");
  if (alpha_decay_epochs < 1)
    throw std::invalid_argument("CompositeLossConfig: alpha_decay_epochs must be >= 1");
}

nlohmann::json CompositeLossConfig::to_json() const {
  return {{"lambda1", lambda1}, {"lambda2", lambda2}, {"alpha_decay_epochs", alpha_decay_epochs}};
}

CompositeLossConfig CompositeLossConfig::from_json(const nlohmann::json& j) {
  CompositeLossConfig cfg;
  cfg.lambda1 = j.value("lambda1", cfg.lambda1);
  cfg.lambda2 = j.value("lambda2", cfg.lambda2);
  cfg.alpha_decay_epochs = j.value("alpha_decay_epochs", cfg.alpha_decay_epochs);
  cfg.validate();
  return cfg;
}

torch::Tensor cb_loss(const torch::Tensor& pred, const torch::Tensor& target,
                      const LcbConfig& cfg, const NormalizationSpec& spec,
                      const ClassWeightTable& table) {
  cfg.validate();
  if (!pred.sizes().equals(target.sizes()))
    throw std::invalid_argument("cb_loss: shape mismatch between pred and target");
  auto physical = inverse_transform(target.detach(), spec);
  auto weights = class_weights(physical, table);
  auto diff = pred - target;
  auto per_pixel = weights * (diff.pow(2) + cfg.beta * diff.abs());
  return per_pixel.mean();
}

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed, torch::Dtype dtype) {
  auto gen = at::detail::createCPUGenerator(seed);
  auto opts = torch::TensorOptions().dtype(dtype);
  const int widths[] = {16, 32, 64};
  int in_channels = 3;
  for (int out_channels : widths) {
    const double scale = std::sqrt(2.0 / (in_channels * 9.0));
    kernels_.push_back(torch::randn({out_channels, in_channels, 3, 3}, gen, opts) * scale);
    biases_.push_back(torch::zeros({out_channels}, opts));
    in_channels = out_channels;
  }
}

std::vector<torch::Tensor> RandomConvExtractor::features(const torch::Tensor& x) const {
  if (x.dim() != 4 || x.size(1) != 1)
    throw std::invalid_argument("RandomConvExtractor: expected (B, 1, H, W) input");
  auto h = x.to(kernels_.front().scalar_type()).repeat({1, 3, 1, 1});
  std::vector<torch::Tensor> out;
  out.reserve(kernels_.size());
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    h = torch::conv2d(h, kernels_[i], biases_[i], /*stride=*/2, /*padding=*/1);
    h = torch::relu(h);
    out.push_back(h);
  }
  return out;
}

const PerceptualExtractor& default_perceptual_extractor() {
  static const RandomConvExtractor extractor;
  return extractor;
}

namespace {

torch::Tensor as_batched_frames(const torch::Tensor& x) {
  switch (x.dim()) {
    case 2: return x.unsqueeze(0).unsqueeze(0);
    case 3: return x.unsqueeze(0);
    case 4: return x;
    default: throw std::invalid_argument("perceptual_distance: expected 2-4 dims");
  }
}

}  // namespace

torch::Tensor perceptual_distance(const torch::Tensor& pred, const torch::Tensor& target,
                                  const PerceptualExtractor& extractor) {
  if (!pred.sizes().equals(target.sizes()))
    throw std::invalid_argument("perceptual_distance: shape mismatch");
  auto fa = extractor.features(as_batched_frames(pred));
  auto fb = extractor.features(as_batched_frames(target));
  constexpr double kEps = 1e-10;
  torch::Tensor total;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    auto na = fa[i] / torch::sqrt(fa[i].pow(2).sum(1, /*keepdim=*/true) + kEps);
    auto nb = fb[i] / torch::sqrt(fb[i].pow(2).sum(1, /*keepdim=*/true) + kEps);
    auto layer = (na - nb).pow(2).sum(1).mean();  // channel sum, then spatial/batch mean
    total = total.defined() ? total + layer : layer;
  }
  return total / static_cast<double>(fa.size());
}

torch::Tensor lcb_loss(const torch::Tensor& pred, const torch::Tensor& target,
                       const LcbConfig& cfg, const NormalizationSpec& spec,
                       const ClassWeightTable& table, const PerceptualExtractor& extractor) {
  cfg.validate();
  auto cb = cb_loss(pred, target, cfg, spec, table);
  if (cfg.alpha == 1.0) return cb;  // skip the extractor in the degenerate mix
  auto perceptual = perceptual_distance(pred, target, extractor);
  return (1.0 - cfg.alpha) * perceptual + cfg.alpha * cb;
}

double alpha_schedule(int epoch, const CompositeLossConfig& cfg) {
  cfg.validate();
  if (epoch < 0) throw std::invalid_argument("alpha_schedule: epoch must be >= 0");
  return std::max(0.0, 1.0 - static_cast<double>(epoch) / cfg.alpha_decay_epochs);
}

torch::Tensor composite_loss(const torch::Tensor& l_initial, const torch::Tensor& l_forecast,
                             const torch::Tensor& l_one_step, int epoch,
                             const CompositeLossConfig& cfg) {
  const double alpha = alpha_schedule(epoch, cfg);
  return alpha * l_initial + (1.0 - alpha) * (cfg.lambda1 * l_forecast + cfg.lambda2 * l_one_step);
}

double composite_loss(double l_initial, double l_forecast, double l_one_step, int epoch,
                      const CompositeLossConfig& cfg) {
  const double alpha = alpha_schedule(epoch, cfg);
  return alpha * l_initial + (1.0 - alpha) * (cfg.lambda1 * l_forecast + cfg.lambda2 * l_one_step);
}

}  // namespace nowcast
