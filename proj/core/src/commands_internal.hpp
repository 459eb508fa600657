#pragma once

// Helpers shared between the command implementations; not installed.

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "nowcast/baselines.hpp"
#include "nowcast/commands.hpp"
#include "nowcast/dyffusion.hpp"
#include "nowcast/rng.hpp"

namespace nowcast::detail {

inline std::filesystem::path dataset_file(const ExperimentConfig& cfg, const std::string& split) {
  return cfg.resolve(cfg.data.dataset_dir) / (split + ".nwc");
}

inline SequenceDataset load_split(const ExperimentConfig& cfg, const std::string& split) {
  auto path = dataset_file(cfg, split);
  if (!std::filesystem::exists(path))
    throw std::runtime_error("missing dataset " + path.string() +
                             " (run the synth or ingest subcommand first)");
  return load_dataset(path);
}

inline constexpr std::uint64_t kEvalSalt = 0x6576616cULL;

inline std::uint64_t eval_seed(std::uint64_t base, std::int64_t sample) {
  return member_seed(base ^ kEvalSalt, static_cast<int>(sample));
}

struct ForecastResult {
  std::optional<EnsembleForecast> ensemble;
  std::optional<BaselineForecast> deterministic;

  torch::Tensor mean_frames() const {
    return ensemble ? ensemble_mean(*ensemble) : deterministic->frames;
  }
};

// Loads checkpoints lazily so `persistence`-only runs need no models on disk.
class ModelSet {
 public:
  ModelSet(const ExperimentConfig& cfg, const std::string& fingerprint)
      : cfg_(cfg), fingerprint_(fingerprint) {}

  ForecastResult run(const std::string& tag, const RainSequence& seq, std::int64_t sample) {
    if (tag == "persistence")
      return {std::nullopt, persistence_forecast(seq.x0(), seq.horizon())};
    if (tag == "dyffusion") {
      auto& state = dyffusion();
      auto forecast =
          rollout(seq.x0(), state, cfg_.eval.members, eval_seed(cfg_.train.seed, sample));
      return {std::move(forecast), std::nullopt};
    }
    if (tag == "convlstm_bce" || tag == "convlstm_lcb") {
      auto& net = convlstm(tag);
      const int t = net->cfg.context_frames;
      if (seq.context < t)
        throw std::runtime_error("dataset context (" + std::to_string(seq.context) +
                                 " frames) is too short for the ConvLSTM (" + std::to_string(t) +
                                 ")");
      auto context = seq.frames.slice(0, seq.context - t, seq.context);
      return {std::nullopt, convlstm_rollout(net, context, seq.horizon(), tag)};
    }
    throw std::invalid_argument("unknown model tag '" + tag +
                                "' (expected dyffusion, convlstm_bce, convlstm_lcb or persistence)");
  }

  torch::Tensor frames(const std::string& tag, const RainSequence& seq, std::int64_t sample = 0) {
    return run(tag, seq, sample).mean_frames();
  }

 private:
  DyffusionState& dyffusion() {
    if (!dyffusion_) {
      auto [interp, imeta] =
          load_unet_checkpoint(checkpoint_path(cfg_, "interpolator"), "interpolator", fingerprint_);
      auto [fc, fmeta] =
          load_unet_checkpoint(checkpoint_path(cfg_, "forecastor"), "forecastor", fingerprint_);
      DyffusionState state;
      state.interpolator = std::make_shared<UNetInterpolator>(interp);
      state.forecastor = std::make_shared<UNetForecastor>(fc);
      state.horizon_steps = cfg_.data.horizon;
      dyffusion_ = std::move(state);
    }
    return *dyffusion_;
  }

  ConvLSTM& convlstm(const std::string& tag) {
    auto it = convlstms_.find(tag);
    if (it == convlstms_.end()) {
      auto [net, meta] = load_convlstm_checkpoint(checkpoint_path(cfg_, tag), fingerprint_);
      it = convlstms_.emplace(tag, net).first;
    }
    return it->second;
  }

  const ExperimentConfig& cfg_;
  std::string fingerprint_;
  std::optional<DyffusionState> dyffusion_;
  std::map<std::string, ConvLSTM> convlstms_;
};

}  // namespace nowcast::detail
