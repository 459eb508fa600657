#pragma once

#include <torch/torch.h>

#include <functional>
#include <string>

#include "nowcast/dyffusion.hpp"
#include "nowcast/losses.hpp"
#include "nowcast/networks.hpp"

namespace nowcast {

struct BaselineForecast {
  torch::Tensor frames;   // (h, C, H, W) in [0,1]
  std::string model_tag;  // "convlstm_bce" | "convlstm_lcb" | "persistence"
  double gen_seconds = 0.0;
};

/// Naive skill floor: every forecast frame equals x0. x0: (C, H, W).
BaselineForecast persistence_forecast(const torch::Tensor& x0, int horizon = 8);

enum class ConvLstmLoss { kBce, kLcb };

/// One-step supervision: predict frame k+context from frames k..k+context-1,
/// with the window start drawn uniformly over the valid range. BCE treats
/// normalized values as soft targets.
torch::Tensor train_convlstm_step(ConvLSTM& net, SequenceBatch& batch, ConvLstmLoss kind,
                                  const LcbConfig& lcb, const NormalizationSpec& spec,
                                  torch::Generator& gen, const ClassWeightTable& table = {},
                                  const PerceptualExtractor& px = default_perceptual_extractor());

/// Hook applied to each predicted frame before it re-enters the context
/// window; used by tests to probe autoregressive dependence.
using RolloutHook = std::function<torch::Tensor(int step, const torch::Tensor& pred)>;

/// Deterministic autoregressive rollout (dropout off): predict, append, slide
/// the context window. context: (T, C, H, W) with T == cfg.context_frames.
BaselineForecast convlstm_rollout(ConvLSTM& net, const torch::Tensor& context, int horizon = 8,
                                  const std::string& model_tag = "convlstm_lcb",
                                  const RolloutHook& hook = nullptr);

/// Extension point for external statistical nowcasters (e.g. a STEPS
/// implementation): consumes context frames in mm/h, returns an ensemble in
/// mm/h. Not implemented in this repository; see README.
class StatisticalNowcaster {
 public:
  virtual ~StatisticalNowcaster() = default;
  /// context: (T, C, H, W) physical mm/h. Returns (X, h, C, H, W) in mm/h.
  virtual torch::Tensor nowcast(const torch::Tensor& context_mm_h, int horizon,
                                int members) = 0;
};

}  // namespace nowcast
