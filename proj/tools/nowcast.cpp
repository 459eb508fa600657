// nowcast: experiment harness for the precipitation-nowcasting toolkit.
//
//   nowcast ingest|synth|train|evaluate|plot --config <path>
//           [--preset synth|full] [--seed N] [--stage S] [--models a,b,c]

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "nowcast/commands.hpp"
#include "nowcast/experiment.hpp"

namespace {

struct CommonArgs {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "experiment config file (JSON)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--preset", args.preset, "configuration preset")
      ->check(CLI::IsMember({"synth", "full"}));
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&args](std::uint64_t s) { args.seed = s; }, "override train.seed");
}

nowcast::ExperimentConfig load_config(const CommonArgs& args) {
  std::optional<std::filesystem::path> path;
  if (!args.config.empty()) path = args.config;
  std::optional<std::string> preset;
  if (!args.preset.empty()) preset = args.preset;
  if (!path && !preset)
    throw CLI::ValidationError("--config or --preset is required");
  return nowcast::ExperimentConfig::load(path, preset, args.seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"precipitation nowcasting toolkit"};
  app.require_subcommand(1);

  CommonArgs ingest_args, synth_args, train_args, eval_args, plot_args;
  std::string stage = "interpolator";
  std::vector<std::string> eval_models = {"dyffusion", "convlstm_lcb", "convlstm_bce",
                                          "persistence"};
  std::vector<std::string> plot_models;

  auto* ingest = app.add_subcommand("ingest", "preprocess IMERG-format granules into a dataset");
  add_common(ingest, ingest_args);

  auto* synth = app.add_subcommand("synth", "generate the synthetic advection dataset");
  add_common(synth, synth_args);

  auto* train = app.add_subcommand("train", "run one training stage");
  add_common(train, train_args);
  train->add_option("--stage", stage, "interpolator|forecastor|convlstm_bce|convlstm_lcb")
      ->required();

  auto* evaluate = app.add_subcommand("evaluate", "score models on the test split");
  add_common(evaluate, eval_args);
  evaluate->add_option("--models", eval_models, "model tags to evaluate")->delimiter(',');

  auto* plot = app.add_subcommand("plot", "render forecast panels and degradation curves");
  add_common(plot, plot_args);
  plot->add_option("--models", plot_models, "model tags to plot")->delimiter(',')->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (ingest->parsed()) return nowcast::cmd_ingest(load_config(ingest_args), std::cout);
    if (synth->parsed()) return nowcast::cmd_synth(load_config(synth_args), std::cout);
    if (train->parsed()) return nowcast::cmd_train(load_config(train_args), stage, std::cout);
    if (evaluate->parsed())
      return nowcast::cmd_evaluate(load_config(eval_args), eval_models, std::cout);
    if (plot->parsed()) return nowcast::cmd_plot(load_config(plot_args), plot_models, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
