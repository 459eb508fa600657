#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "nowcast/data.hpp"

namespace nowcast {

/// Monte Carlo dropout with an explicit RNG stream. Unlike module-mode
/// dropout this stays active whenever `on` is set, and the mask is fully
/// determined by the generator state.
torch::Tensor mc_dropout(const torch::Tensor& x, double p, bool on, torch::Generator* gen);

struct UNetConfig {
  int in_frames = 2;        // x0 plus one conditioning frame
  int base_channels = 32;   // desk-scale default; 64 for full 128x128 runs
  int depth = 3;            // input H, W must be divisible by 2^depth
  double dropout_rate = 0.0;
  int time_embedding_dim = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
  bool operator==(const UNetConfig&) const = default;
};

/// Double conv + group norm + SiLU with an additive per-channel time bias
/// and Monte Carlo dropout on the way out.
struct ConvBlockImpl : torch::nn::Module {
  ConvBlockImpl(int in_channels, int out_channels, int time_dim, double dropout);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& time_emb, bool dropout_on,
                        torch::Generator* gen);

  torch::nn::Conv2d conv_a{nullptr}, conv_b{nullptr};
  torch::nn::GroupNorm norm_a{nullptr}, norm_b{nullptr};
  torch::nn::Linear time_proj{nullptr};
  double dropout = 0.0;
};
TORCH_MODULE(ConvBlock);

/// Shared Interpolator/Forecastor backbone: a conditional U-Net whose
/// interpolation index i_n (normalized to [0,1]) enters via a sinusoidal
/// embedding added at each resolution level. Output is sigmoid-bounded.
struct TimeConditionedUNetImpl : torch::nn::Module {
  explicit TimeConditionedUNetImpl(UNetConfig cfg);

  /// x0, cond: (B, 1, H, W) in [0,1]; time_index: (B,) float in [0,1].
  /// With dropout_on, masks are sampled from `gen` on every call.
  torch::Tensor forward(const torch::Tensor& x0, const torch::Tensor& cond,
                        const torch::Tensor& time_index, bool dropout_on = false,
                        torch::Generator* gen = nullptr);

  UNetConfig cfg;

 private:
  torch::nn::Conv2d stem_{nullptr};
  torch::nn::Linear time_fc1_{nullptr}, time_fc2_{nullptr};
  std::vector<ConvBlock> encoder_;
  std::vector<torch::nn::Conv2d> down_;
  ConvBlock mid_{nullptr};
  std::vector<torch::nn::ConvTranspose2d> up_;
  std::vector<ConvBlock> decoder_;
  torch::nn::Conv2d head_a_{nullptr}, head_b_{nullptr};
};
TORCH_MODULE(TimeConditionedUNet);

struct ConvLSTMConfig {
  int layers = 2;
  int hidden_channels = 128;
  int kernel = 5;  // odd
  double pixel_dropout = 0.15;
  int context_frames = 4;

  void validate() const;
  nlohmann::json to_json() const;
  static ConvLSTMConfig from_json(const nlohmann::json& j);
  bool operator==(const ConvLSTMConfig&) const = default;
};

struct ConvLSTMCellImpl : torch::nn::Module {
  ConvLSTMCellImpl(int in_channels, int hidden_channels, int kernel);
  /// One timestep; state is (hidden, cell).
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x,
                                                  const torch::Tensor& hidden,
                                                  const torch::Tensor& cell);
  torch::nn::Conv2d gates{nullptr};
  int hidden_channels;
};
TORCH_MODULE(ConvLSTMCell);

/// Stacked ConvLSTM predicting the next frame from a fixed-length context.
/// Pixel-wise dropout after each cell when dropout_on; sigmoid-bounded output.
struct ConvLSTMImpl : torch::nn::Module {
  explicit ConvLSTMImpl(ConvLSTMConfig cfg);

  /// context: (B, T, C, H, W) with T == cfg.context_frames. Returns (B, C, H, W).
  torch::Tensor next_frame(const torch::Tensor& context, bool dropout_on = false,
                           torch::Generator* gen = nullptr);

  ConvLSTMConfig cfg;

 private:
  std::vector<ConvLSTMCell> cells_;
  torch::nn::Conv2d head_{nullptr};
};
TORCH_MODULE(ConvLSTM);

/// Checkpoints carry the parameters plus everything needed to validate reuse:
/// the network config, the experiment config hash and the NormalizationSpec
/// fingerprint of the dataset the model was trained on.
struct CheckpointMeta {
  std::string kind;  // "interpolator" | "forecastor" | "convlstm"
  nlohmann::json net_config;
  std::string normspec_fingerprint;
  std::string config_hash;
  int epochs_completed = 0;
  std::vector<double> loss_history;  // mean loss per epoch

  nlohmann::json to_json() const;
  static CheckpointMeta from_json(const nlohmann::json& j);
};

/// Writes `<path>` (parameter archive) and `<path>.json` (meta).
void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module,
                     const CheckpointMeta& meta);

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// Load a U-Net checkpoint. Verifies the stored kind and, when given, the
/// NormalizationSpec fingerprint; mismatches are hard errors.
std::pair<TimeConditionedUNet, CheckpointMeta> load_unet_checkpoint(
    const std::filesystem::path& path, const std::string& expected_kind,
    const std::optional<std::string>& expected_fingerprint = std::nullopt);

std::pair<ConvLSTM, CheckpointMeta> load_convlstm_checkpoint(
    const std::filesystem::path& path,
    const std::optional<std::string>& expected_fingerprint = std::nullopt);

}  // namespace nowcast
