#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <vector>

#include "nowcast/data.hpp"
#include "nowcast/losses.hpp"
#include "nowcast/networks.hpp"

namespace nowcast {

/// What a training step touched a frame for. kNetworkInput accesses are the
/// instrumentation surface for the horizon-blindness and constant-footprint
/// contracts: Stage-2 code must never request target frames as inputs.
enum class FrameUse { kNetworkInput, kLossTarget };

struct FrameAccess {
  std::int64_t sample;
  std::int64_t frame;  // absolute index into the sequence
  FrameUse use;
};

/// A (B, S, C, H, W) batch whose frames are reachable only through logging
/// accessors. The access log is the data-footprint instrumentation.
class SequenceBatch {
 public:
  explicit SequenceBatch(torch::Tensor frames, int context = 1);

  std::int64_t size() const { return frames_.size(0); }
  int context() const { return context_; }
  int horizon() const { return static_cast<int>(frames_.size(1)) - context_; }
  std::int64_t x0_index() const { return context_ - 1; }
  c10::IntArrayRef frame_shape() const;

  /// One frame index for every sample: (B, C, H, W).
  torch::Tensor frame(std::int64_t index, FrameUse use) const;
  /// Per-sample indices: (B,) int64 -> (B, C, H, W).
  torch::Tensor gather(const torch::Tensor& indices, FrameUse use) const;

  const std::vector<FrameAccess>& accesses() const { return log_; }
  void reset_access_log() { log_.clear(); }

 private:
  torch::Tensor frames_;
  int context_;
  mutable std::vector<FrameAccess> log_;
};

/// Interpolator view used by the framework. Backed by a TimeConditionedUNet
/// in production and by oracle stubs in tests.
class Interpolator {
 public:
  virtual ~Interpolator() = default;
  /// x0, horizon: (B, 1, H, W). steps: (B,) int64, each in [1, h-1].
  virtual torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& horizon,
                                    const torch::Tensor& steps, int horizon_steps,
                                    bool dropout_on, torch::Generator* gen) = 0;
  virtual double dropout_rate() const = 0;
};

class Forecastor {
 public:
  virtual ~Forecastor() = default;
  virtual torch::Tensor forecast(const torch::Tensor& x0, const torch::Tensor& cond,
                                 bool dropout_on, torch::Generator* gen) = 0;
};

class UNetInterpolator final : public Interpolator {
 public:
  explicit UNetInterpolator(TimeConditionedUNet net) : net_(std::move(net)) {}
  torch::Tensor interpolate(const torch::Tensor& x0, const torch::Tensor& horizon,
                            const torch::Tensor& steps, int horizon_steps, bool dropout_on,
                            torch::Generator* gen) override;
  double dropout_rate() const override { return net_->cfg.dropout_rate; }
  TimeConditionedUNet& net() { return net_; }

 private:
  TimeConditionedUNet net_;
};

class UNetForecastor final : public Forecastor {
 public:
  explicit UNetForecastor(TimeConditionedUNet net) : net_(std::move(net)) {}
  /// The Forecastor reuses the interpolator signature with the time index
  /// fixed to 1 (the horizon).
  torch::Tensor forecast(const torch::Tensor& x0, const torch::Tensor& cond, bool dropout_on,
                         torch::Generator* gen) override;
  TimeConditionedUNet& net() { return net_; }

 private:
  TimeConditionedUNet net_;
};

/// Interpolation with the index-boundary convention: step 0 returns x0 and
/// step h returns the conditioning horizon identically, bypassing the network.
/// Mixed batches evaluate the network once and row-select the boundaries.
torch::Tensor interpolate_with_endpoints(Interpolator& interp, const torch::Tensor& x0,
                                         const torch::Tensor& horizon,
                                         const torch::Tensor& steps, int horizon_steps,
                                         bool dropout_on, torch::Generator* gen);

/// Clamped cold-sampling update:
///   Clamp_[0,1]( I(x0, xhat_h, i_{n+1}) - I(x0, xhat_h, i_n) + xhat_{i_n} ).
/// Both interpolator calls see the same generator state, so within one update
/// they share a dropout mask. n: (B,) int64, each in [0, h-1].
torch::Tensor cold_sampling_update(Interpolator& interp, const torch::Tensor& x0,
                                   const torch::Tensor& xhat_h, const torch::Tensor& xhat_in,
                                   const torch::Tensor& n, int horizon_steps,
                                   torch::Generator& gen);
/// Scalar-step convenience overload.
torch::Tensor cold_sampling_update(Interpolator& interp, const torch::Tensor& x0,
                                   const torch::Tensor& xhat_h, const torch::Tensor& xhat_in,
                                   int n, int horizon_steps, torch::Generator& gen);

/// Stage 1: draw n ~ U{1..h-1} per sample and supervise
/// I(x0, x_h, i_n) against x_{t+i_n}. Touches frames {0, n, h} only.
torch::Tensor train_interpolator_step(Interpolator& interp, SequenceBatch& batch,
                                      const LcbConfig& lcb, const NormalizationSpec& spec,
                                      torch::Generator& gen, const ClassWeightTable& table = {},
                                      const PerceptualExtractor& px = default_perceptual_extractor());

/// Stage 2: initial forecast F(x0, x0), interpolation from the initial
/// forecast (interpolator frozen, dropout on), horizon re-forecast, and a
/// cold-sampled one-step-ahead estimate. The ground-truth horizon appears
/// only inside loss targets, never as a network input.
torch::Tensor train_forecastor_step(Forecastor& fc, Interpolator& interp, SequenceBatch& batch,
                                    int epoch, const LcbConfig& lcb,
                                    const CompositeLossConfig& composite,
                                    const NormalizationSpec& spec, torch::Generator& gen,
                                    const ClassWeightTable& table = {},
                                    const PerceptualExtractor& px = default_perceptual_extractor());

struct DyffusionState {
  std::shared_ptr<Interpolator> interpolator;
  std::shared_ptr<Forecastor> forecastor;
  int horizon_steps = 8;
  bool interp_dropout_enabled_in_stage2 = true;
};

/// X member rollouts of h frames each, with per-member RNG provenance.
struct EnsembleForecast {
  torch::Tensor members;  // (X, h, C, H, W) in [0,1]
  std::vector<std::uint64_t> member_seeds;
  std::vector<int> lead_minutes;  // {30, 60, ..., 30*h}
  double gen_seconds = 0.0;       // forecast generation wall time
};

/// Derive the per-member RNG seed from the base seed (splitmix64 chain).
std::uint64_t member_seed(std::uint64_t base_seed, int member);

/// One member rollout; fully determined by (x0, state parameters, seed).
torch::Tensor rollout_member(const torch::Tensor& x0, DyffusionState& state, std::uint64_t seed);

/// Autoregressive cold-sampling rollout. Per member: xhat_h <- F(x0, x0);
/// for n = 0..h-2: cold update then xhat_h <- F(x0, xhat_{i_{n+1}}). The
/// member sequence is [xhat_{i_1}, .., xhat_{i_{h-1}}, final xhat_h]; F runs
/// exactly h times per member. Dropout on throughout.
EnsembleForecast rollout(const torch::Tensor& x0, DyffusionState& state, int members,
                         std::uint64_t seed);

/// Pixel-wise arithmetic mean over members: (h, C, H, W).
torch::Tensor ensemble_mean(const EnsembleForecast& forecast);

}  // namespace nowcast
