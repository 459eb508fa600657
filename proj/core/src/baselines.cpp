#include "nowcast/baselines.hpp"

#include <chrono>
#include <stdexcept>

namespace nowcast {

BaselineForecast persistence_forecast(const torch::Tensor& x0, int horizon) {
  TORCH_CHECK(x0.dim() == 3, "persistence_forecast: x0 must be (C, H, W)");
  TORCH_CHECK(horizon >= 1, "persistence_forecast: horizon must be >= 1");
  const auto start = std::chrono::steady_clock::now();
  BaselineForecast out;
  out.frames = x0.unsqueeze(0).repeat({horizon, 1, 1, 1}).clone();
  out.model_tag = "persistence";
  out.gen_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

torch::Tensor train_convlstm_step(ConvLSTM& net, SequenceBatch& batch, ConvLstmLoss kind,
                                  const LcbConfig& lcb, const NormalizationSpec& spec,
                                  torch::Generator& gen, const ClassWeightTable& table,
                                  const PerceptualExtractor& px) {
  const int t = net->cfg.context_frames;
  const auto total = batch.context() + batch.horizon();
  if (total < t + 1)
    throw std::invalid_argument("train_convlstm_step: batch sequences must provide at least " +
                                std::to_string(t + 1) + " consecutive frames");

  // One-step supervision on a window drawn uniformly over the valid range.
  const auto max_start = total - t - 1;
  const auto start = max_start == 0
                         ? 0
                         : torch::randint(0, max_start + 1, {1}, gen,
                                          torch::TensorOptions().dtype(torch::kInt64))
                               .item<std::int64_t>();
  std::vector<torch::Tensor> context;
  context.reserve(t);
  for (int k = 0; k < t; ++k)
    context.push_back(batch.frame(start + k, FrameUse::kNetworkInput));
  auto target = batch.frame(start + t, FrameUse::kLossTarget);

  auto pred = net->next_frame(torch::stack(context, 1), /*dropout_on=*/true, &gen);
  switch (kind) {
    case ConvLstmLoss::kBce:
      return torch::binary_cross_entropy(torch::clamp(pred, 1e-7, 1.0 - 1e-7), target);
    case ConvLstmLoss::kLcb:
      return lcb_loss(pred, target, lcb, spec, table, px);
  }
  throw std::logic_error("train_convlstm_step: unknown loss kind");
}

BaselineForecast convlstm_rollout(ConvLSTM& net, const torch::Tensor& context, int horizon,
                                  const std::string& model_tag, const RolloutHook& hook) {
  TORCH_CHECK(context.dim() == 4, "convlstm_rollout: context must be (T, C, H, W)");
  TORCH_CHECK(context.size(0) == net->cfg.context_frames, "convlstm_rollout: expected ",
              net->cfg.context_frames, " context frames, got ", context.size(0));
  torch::NoGradGuard no_grad;
  const auto start = std::chrono::steady_clock::now();

  auto window = context.unsqueeze(0);  // (1, T, C, H, W)
  std::vector<torch::Tensor> frames;
  frames.reserve(horizon);
  for (int k = 0; k < horizon; ++k) {
    auto pred = net->next_frame(window, /*dropout_on=*/false, nullptr);
    if (hook) pred = hook(k, pred);
    frames.push_back(pred);
    window = torch::cat({window.slice(1, 1), pred.unsqueeze(1)}, 1);
  }

  BaselineForecast out;
  out.frames = torch::cat(frames, 0);
  out.model_tag = model_tag;
  out.gen_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace nowcast
