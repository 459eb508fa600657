#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/experiment.hpp"

namespace nowcast {

/// Granules -> preprocessed dataset container + NormalizationSpec sidecar.
/// Prints frame/gap/sequence counts to `out`.
int cmd_ingest(const ExperimentConfig& cfg, std::ostream& out);

/// Synthetic advection dataset, split chronologically into train/val/test.
int cmd_synth(const ExperimentConfig& cfg, std::ostream& out);

/// stage: "interpolator" | "forecastor" | "convlstm" (+ "_bce"/"_lcb" suffix
/// for the baseline loss variant). The forecastor stage requires an
/// interpolator checkpoint with a matching config hash.
int cmd_train(const ExperimentConfig& cfg, const std::string& stage, std::ostream& out);

/// Evaluate model tags ("dyffusion", "convlstm_bce", "convlstm_lcb",
/// "persistence") on the test split; writes one Table-shaped CSV plus a
/// per-lead JSON report per model.
int cmd_evaluate(const ExperimentConfig& cfg, const std::vector<std::string>& models,
                 std::ostream& out);

/// Panel figure (rows: truth + one per model; columns: initial condition +
/// hourly leads, shared mm/h colormap) plus per-lead degradation curves.
int cmd_plot(const ExperimentConfig& cfg, const std::vector<std::string>& models,
             std::ostream& out);

/// Checkpoint/report locations used by the commands (all under the run dir).
std::filesystem::path checkpoint_path(const ExperimentConfig& cfg, const std::string& stage);

/// Panel figure shape: (rows, cols) = (truth + models, initial condition +
/// hourly leads).
std::pair<int, int> panel_grid_dims(int n_models, int n_hourly_leads);

}  // namespace nowcast
