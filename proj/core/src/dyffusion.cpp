#include "nowcast/dyffusion.hpp"

#include <chrono>
#include <stdexcept>

#include "nowcast/rng.hpp"

namespace nowcast {

SequenceBatch::SequenceBatch(torch::Tensor frames, int context) : frames_(std::move(frames)), context_(context) {
  TORCH_CHECK(frames_.dim() == 5, "SequenceBatch: expected (B, S, C, H, W)");
  TORCH_CHECK(context_ >= 1 && context_ < frames_.size(1), "SequenceBatch: bad context length");
}

c10::IntArrayRef SequenceBatch::frame_shape() const { return frames_.sizes().slice(2); }

torch::Tensor SequenceBatch::frame(std::int64_t index, FrameUse use) const {
  TORCH_CHECK(index >= 0 && index < frames_.size(1), "SequenceBatch: frame index out of range");
  for (std::int64_t b = 0; b < frames_.size(0); ++b) log_.push_back({b, index, use});
  return frames_.select(1, index);
}

torch::Tensor SequenceBatch::gather(const torch::Tensor& indices, FrameUse use) const {
  TORCH_CHECK(indices.dim() == 1 && indices.size(0) == frames_.size(0),
              "SequenceBatch: indices must be (B,)");
  auto idx = indices.to(torch::kInt64);
  TORCH_CHECK(idx.min().item<std::int64_t>() >= 0 &&
                  idx.max().item<std::int64_t>() < frames_.size(1),
              "SequenceBatch: frame index out of range");
  for (std::int64_t b = 0; b < frames_.size(0); ++b)
    log_.push_back({b, idx[b].item<std::int64_t>(), use});
  return frames_.index({torch::arange(frames_.size(0)), idx});
}

torch::Tensor UNetInterpolator::interpolate(const torch::Tensor& x0, const torch::Tensor& horizon,
                                            const torch::Tensor& steps, int horizon_steps,
                                            bool dropout_on, torch::Generator* gen) {
  auto t = steps.to(torch::kFloat32) / static_cast<double>(horizon_steps);
  return net_->forward(x0, horizon, t, dropout_on, gen);
}

torch::Tensor UNetForecastor::forecast(const torch::Tensor& x0, const torch::Tensor& cond,
                                       bool dropout_on, torch::Generator* gen) {
  auto t = torch::ones({x0.size(0)}, torch::TensorOptions().dtype(torch::kFloat32));
  return net_->forward(x0, cond, t, dropout_on, gen);
}

torch::Tensor interpolate_with_endpoints(Interpolator& interp, const torch::Tensor& x0,
                                         const torch::Tensor& horizon,
                                         const torch::Tensor& steps, int horizon_steps,
                                         bool dropout_on, torch::Generator* gen) {
  TORCH_CHECK(horizon_steps >= 2, "interpolate_with_endpoints: horizon must be >= 2");
  auto idx = steps.to(torch::kInt64);
  TORCH_CHECK(idx.min().item<std::int64_t>() >= 0 &&
                  idx.max().item<std::int64_t>() <= horizon_steps,
              "interpolate_with_endpoints: step index out of range");
  auto at_lo = idx.eq(0).reshape({-1, 1, 1, 1});
  auto at_hi = idx.eq(horizon_steps).reshape({-1, 1, 1, 1});
  const bool all_boundary = (at_lo | at_hi).all().item<bool>();
  torch::Tensor interior = x0;
  if (!all_boundary) {
    // Boundary rows are clamped into range for the batched call and replaced
    // by the exact endpoint below.
    auto safe = torch::clamp(idx, 1, horizon_steps - 1);
    interior = interp.interpolate(x0, horizon, safe, horizon_steps, dropout_on, gen);
  }
  return torch::where(at_lo, x0, torch::where(at_hi, horizon, interior));
}

torch::Tensor cold_sampling_update(Interpolator& interp, const torch::Tensor& x0,
                                   const torch::Tensor& xhat_h, const torch::Tensor& xhat_in,
                                   const torch::Tensor& n, int horizon_steps,
                                   torch::Generator& gen) {
  auto idx = n.to(torch::kInt64);
  TORCH_CHECK(idx.min().item<std::int64_t>() >= 0 &&
                  idx.max().item<std::int64_t>() <= horizon_steps - 1,
              "cold_sampling_update: step index out of range");
  // Both interpolator evaluations run from the same generator state so they
  // share one dropout mask; the difference term then cancels network noise.
  auto state = gen.get_state();
  auto next_est =
      interpolate_with_endpoints(interp, x0, xhat_h, idx + 1, horizon_steps, true, &gen);
  gen.set_state(state);
  auto curr_est = interpolate_with_endpoints(interp, x0, xhat_h, idx, horizon_steps, true, &gen);
  return torch::clamp(next_est - curr_est + xhat_in, 0.0, 1.0);
}

torch::Tensor cold_sampling_update(Interpolator& interp, const torch::Tensor& x0,
                                   const torch::Tensor& xhat_h, const torch::Tensor& xhat_in,
                                   int n, int horizon_steps, torch::Generator& gen) {
  auto idx = torch::full({x0.size(0)}, n, torch::kInt64);
  return cold_sampling_update(interp, x0, xhat_h, xhat_in, idx, horizon_steps, gen);
}

torch::Tensor train_interpolator_step(Interpolator& interp, SequenceBatch& batch,
                                      const LcbConfig& lcb, const NormalizationSpec& spec,
                                      torch::Generator& gen, const ClassWeightTable& table,
                                      const PerceptualExtractor& px) {
  const int h = batch.horizon();
  if (h < 2)
    throw std::invalid_argument("train_interpolator_step: horizon < 2 leaves no interior timestep");
  const auto x0i = batch.x0_index();
  auto x0 = batch.frame(x0i, FrameUse::kNetworkInput);
  auto xh = batch.frame(x0i + h, FrameUse::kNetworkInput);
  auto n = torch::randint(1, h, {batch.size()}, gen, torch::TensorOptions().dtype(torch::kInt64));
  auto target = batch.gather(x0i + n, FrameUse::kLossTarget);
  auto pred = interp.interpolate(x0, xh, n, h, /*dropout_on=*/true, &gen);
  return lcb_loss(pred, target, lcb, spec, table, px);
}

torch::Tensor train_forecastor_step(Forecastor& fc, Interpolator& interp, SequenceBatch& batch,
                                    int epoch, const LcbConfig& lcb,
                                    const CompositeLossConfig& composite,
                                    const NormalizationSpec& spec, torch::Generator& gen,
                                    const ClassWeightTable& table, const PerceptualExtractor& px) {
  if (interp.dropout_rate() <= 0.0)
    throw std::invalid_argument(
        "train_forecastor_step: interpolator dropout is disabled; Stage 2 requires stochastic "
        "interpolation");
  const int h = batch.horizon();
  if (h < 2)
    throw std::invalid_argument("train_forecastor_step: horizon < 2 leaves no interior timestep");
  const auto x0i = batch.x0_index();

  // The ground-truth horizon is read only as a loss target below; every
  // network input is x0 or a model estimate.
  auto x0 = batch.frame(x0i, FrameUse::kNetworkInput);
  auto xhat_initial = fc.forecast(x0, x0, /*dropout_on=*/true, &gen);
  auto n = torch::randint(1, h, {batch.size()}, gen, torch::TensorOptions().dtype(torch::kInt64));
  auto xhat_in = interpolate_with_endpoints(interp, x0, xhat_initial, n, h, true, &gen);
  auto xhat_h = fc.forecast(x0, xhat_in, /*dropout_on=*/true, &gen);
  auto xhat_next = cold_sampling_update(interp, x0, xhat_h, xhat_in, n, h, gen);

  auto x_h = batch.frame(x0i + h, FrameUse::kLossTarget);
  auto x_next = batch.gather(x0i + n + 1, FrameUse::kLossTarget);

  auto l_initial = lcb_loss(xhat_initial, x_h, lcb, spec, table, px);
  auto l_forecast = lcb_loss(xhat_h, x_h, lcb, spec, table, px);
  auto l_one_step = lcb_loss(xhat_next, x_next, lcb, spec, table, px);
  return composite_loss(l_initial, l_forecast, l_one_step, epoch, composite);
}

std::uint64_t member_seed(std::uint64_t base_seed, int member) {
  std::uint64_t state = base_seed;
  std::uint64_t value = 0;
  for (int i = 0; i <= member; ++i) value = splitmix64(state);
  return value;
}

torch::Tensor rollout_member(const torch::Tensor& x0_in, DyffusionState& state,
                             std::uint64_t seed) {
  TORCH_CHECK(state.interpolator && state.forecastor, "rollout: untrained DyffusionState");
  const int h = state.horizon_steps;
  TORCH_CHECK(h >= 2, "rollout: horizon must be >= 2");
  torch::NoGradGuard no_grad;
  auto x0 = x0_in.dim() == 3 ? x0_in.unsqueeze(0) : x0_in;
  TORCH_CHECK(x0.dim() == 4 && x0.size(0) == 1, "rollout: x0 must be a single (C, H, W) frame");

  auto gen = at::detail::createCPUGenerator(seed);
  auto xhat_h = state.forecastor->forecast(x0, x0, /*dropout_on=*/true, &gen);
  std::vector<torch::Tensor> frames;
  frames.reserve(h);
  auto xhat_i = x0;
  for (int n = 0; n <= h - 2; ++n) {
    xhat_i = cold_sampling_update(*state.interpolator, x0, xhat_h, xhat_i, n, h, gen);
    frames.push_back(xhat_i);
    xhat_h = state.forecastor->forecast(x0, xhat_i, /*dropout_on=*/true, &gen);
  }
  frames.push_back(xhat_h);  // F has now re-forecast the horizon exactly h times
  return torch::cat(frames, 0);  // (h, C, H, W)
}

EnsembleForecast rollout(const torch::Tensor& x0, DyffusionState& state, int members,
                         std::uint64_t seed) {
  TORCH_CHECK(members >= 1, "rollout: need at least one member");
  const auto start = std::chrono::steady_clock::now();
  EnsembleForecast out;
  std::vector<torch::Tensor> member_frames;
  member_frames.reserve(members);
  for (int m = 0; m < members; ++m) {
    const auto ms = member_seed(seed, m);
    out.member_seeds.push_back(ms);
    member_frames.push_back(rollout_member(x0, state, ms));
  }
  out.members = torch::stack(member_frames, 0);
  for (int k = 1; k <= state.horizon_steps; ++k)
    out.lead_minutes.push_back(static_cast<int>(k * kFrameIntervalSeconds / 60));
  out.gen_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

torch::Tensor ensemble_mean(const EnsembleForecast& forecast) {
  TORCH_CHECK(forecast.members.defined() && forecast.members.size(0) >= 1,
              "ensemble_mean: empty ensemble");
  return forecast.members.mean(0);
}

}  // namespace nowcast
