#include "nowcast/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>

#include "commands_internal.hpp"
#include "nowcast/metrics.hpp"

namespace nowcast {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using detail::dataset_file;
using detail::load_split;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void save_splits(const ExperimentConfig& cfg, const SequenceDataset& ds, std::ostream& out) {
  auto [train, val, test] = ds.split(cfg.data.split_train, cfg.data.split_val, cfg.data.split_test);
  save_dataset(dataset_file(cfg, "train"), train);
  save_dataset(dataset_file(cfg, "val"), val);
  save_dataset(dataset_file(cfg, "test"), test);
  out << "sequences: " << ds.size() << " (train " << train.size() << ", val " << val.size()
      << ", test " << test.size() << ")\n";
}

// Stable per-stage RNG stream identifiers.
int stage_stream_id(const std::string& stage) {
  if (stage == "interpolator") return 1;
  if (stage == "forecastor") return 2;
  if (stage == "convlstm_bce") return 3;
  if (stage == "convlstm_lcb" || stage == "convlstm") return 4;
  throw std::invalid_argument("unknown training stage '" + stage +
                              "' (expected interpolator, forecastor, convlstm_bce or convlstm_lcb)");
}

fs::path manifest_path(const ExperimentConfig& cfg, const std::string& name) {
  auto dir = cfg.resolve(cfg.eval.output_dir) / "manifests";
  fs::create_directories(dir);
  return dir / (name + ".json");
}

void write_stage_manifest(const ExperimentConfig& cfg, const std::string& stage,
                          const std::vector<std::string>& checkpoints,
                          const std::vector<std::string>& reports,
                          const std::map<std::string, double>& timings) {
  RunManifest m;
  m.config_hash = cfg.hash();
  m.stage = stage;
  m.checkpoints = checkpoints;
  m.reports = reports;
  m.timings_s = timings;
  m.write(manifest_path(cfg, stage));
}

struct EpochLog {
  std::vector<double> losses;
};

// Shared training loop: shuffles deterministically, averages the per-step
// loss over each epoch and checkpoints periodically.
template <typename StepFn, typename SaveFn>
EpochLog run_training(const ExperimentConfig& cfg, const SequenceDataset& ds, int start_epoch,
                      std::vector<double> history, torch::optim::Adam& optimizer,
                      torch::Generator& gen, StepFn step, SaveFn save, std::ostream& out) {
  const auto n = ds.size();
  if (n == 0) throw std::runtime_error("training split is empty");
  for (int epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
    auto perm = torch::randperm(n, gen, torch::TensorOptions().dtype(torch::kInt64));
    double epoch_loss = 0.0;
    for (std::int64_t begin = 0; begin < n; begin += cfg.train.batch_size) {
      auto idx = perm.slice(0, begin, std::min<std::int64_t>(begin + cfg.train.batch_size, n));
      auto frames = ds.sequences.index_select(0, idx);
      SequenceBatch batch(frames, ds.context);
      optimizer.zero_grad();
      torch::Tensor loss = step(batch, epoch);
      loss.backward();
      optimizer.step();
      epoch_loss += loss.item<double>() * static_cast<double>(idx.size(0));
    }
    epoch_loss /= static_cast<double>(n);
    history.push_back(epoch_loss);
    out << "epoch " << epoch << " loss " << epoch_loss << "\n";
    if ((epoch + 1) % cfg.train.checkpoint_every == 0 || epoch + 1 == cfg.train.epochs)
      save(epoch + 1, history);
  }
  return {history};
}

CheckpointMeta make_meta(const ExperimentConfig& cfg, const std::string& kind,
                         const nlohmann::json& net_config, const std::string& fingerprint,
                         int epochs, const std::vector<double>& history) {
  CheckpointMeta meta;
  meta.kind = kind;
  meta.net_config = net_config;
  meta.normspec_fingerprint = fingerprint;
  meta.config_hash = cfg.hash();
  meta.epochs_completed = epochs;
  meta.loss_history = history;
  return meta;
}

ConvLstmLoss convlstm_loss_kind(const std::string& stage) {
  return stage == "convlstm_bce" ? ConvLstmLoss::kBce : ConvLstmLoss::kLcb;
}

}  // namespace

std::filesystem::path checkpoint_path(const ExperimentConfig& cfg, const std::string& stage) {
  return cfg.resolve(cfg.eval.output_dir) / "checkpoints" / (stage + ".pt");
}

int cmd_synth(const ExperimentConfig& cfg, std::ostream& out) {
  const auto t0 = Clock::now();
  auto dir = cfg.resolve(cfg.data.dataset_dir);
  DirectoryLock lock(dir);
  auto seqs = synth_advection(cfg.data.synthetic);
  auto ds = SequenceDataset::from_sequences(seqs);
  out << "synthetic frames: " << ds.size() * ds.sequences.size(1) << "\n";
  save_splits(cfg, ds, out);
  write_stage_manifest(cfg, "synth", {}, {}, {{"synth_s", seconds_since(t0)}});
  return 0;
}

int cmd_ingest(const ExperimentConfig& cfg, std::ostream& out) {
  const auto t0 = Clock::now();
  auto granule_dir = cfg.resolve(cfg.data.granule_dir);
  if (!fs::is_directory(granule_dir))
    throw std::runtime_error("granule directory not found: " + granule_dir.string());

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(granule_dir)) {
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (ext == ".h5" || ext == ".hdf5" || ext == ".he5") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no granules in " + granule_dir.string());

  std::vector<RainField> fields;
  fields.reserve(files.size());
  for (const auto& f : files) fields.push_back(read_granule(f, cfg.data.layout));
  std::stable_sort(fields.begin(), fields.end(),
                   [](const RainField& a, const RainField& b) { return a.timestamp < b.timestamp; });

  const int gaps = count_gaps(fields);
  const auto spec = cfg.data.normalization();

  auto dir = cfg.resolve(cfg.data.dataset_dir);
  DirectoryLock lock(dir);

  std::vector<RainSequence> sequences;
  for (const auto& box : cfg.data.boxes) {
    std::vector<RainField> series;
    series.reserve(fields.size());
    for (const auto& field : fields) series.push_back(crop_boxes(field, {box})[0]);
    auto windows =
        window_sequences(series, spec, cfg.data.horizon, cfg.data.stride, cfg.data.context);
    sequences.insert(sequences.end(), windows.begin(), windows.end());
  }
  out << "frames: " << fields.size() << ", gaps: " << gaps << "\n";
  if (sequences.empty()) throw std::runtime_error("ingestion produced no complete sequences");

  auto ds = SequenceDataset::from_sequences(sequences);
  save_splits(cfg, ds, out);
  write_stage_manifest(cfg, "ingest", {}, {}, {{"ingest_s", seconds_since(t0)}});
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& stage, std::ostream& out) {
  const auto t0 = Clock::now();
  const int stream = stage_stream_id(stage);
  auto run_dir = cfg.resolve(cfg.eval.output_dir);
  DirectoryLock lock(run_dir);

  auto ds = load_split(cfg, "train");
  const auto fingerprint = ds.spec.fingerprint();
  if (fingerprint != cfg.data.normalization().fingerprint())
    throw std::runtime_error("dataset NormalizationSpec does not match the config");

  torch::manual_seed(cfg.train.seed);  // parameter init determinism
  auto gen = at::detail::createCPUGenerator(member_seed(cfg.train.seed, stream));
  auto ckpt = checkpoint_path(cfg, stage);
  fs::create_directories(ckpt.parent_path());
  const RandomConvExtractor px(cfg.eval.perceptual_seed);

  int start_epoch = 0;
  std::vector<double> history;
  const bool resuming = !cfg.train.resume_from.empty();

  EpochLog log;
  if (stage == "interpolator") {
    auto net = TimeConditionedUNet(cfg.interpolator_net);
    if (resuming) {
      auto [loaded, meta] = load_unet_checkpoint(cfg.train.resume_from, "interpolator", fingerprint);
      net = loaded;
      start_epoch = meta.epochs_completed;
      history = meta.loss_history;
    }
    UNetInterpolator interp(net);
    torch::optim::Adam optimizer(net->parameters(), cfg.train.learning_rate);
    log = run_training(
        cfg, ds, start_epoch, history, optimizer, gen,
        [&](SequenceBatch& batch, int) {
          return train_interpolator_step(interp, batch, cfg.lcb, ds.spec, gen, cfg.class_weights,
                                         px);
        },
        [&](int epochs, const std::vector<double>& hist) {
          save_checkpoint(ckpt, *net,
                          make_meta(cfg, "interpolator", cfg.interpolator_net.to_json(),
                                    fingerprint, epochs, hist));
        },
        out);
  } else if (stage == "forecastor") {
    auto interp_ckpt = checkpoint_path(cfg, "interpolator");
    if (!fs::exists(interp_ckpt))
      throw std::runtime_error("forecastor stage requires an interpolator checkpoint at " +
                               interp_ckpt.string() + "; run `nowcast train --stage interpolator` first");
    auto [interp_net, interp_meta] = load_unet_checkpoint(interp_ckpt, "interpolator", fingerprint);
    if (interp_meta.config_hash != cfg.hash())
      throw std::runtime_error("config-hash mismatch between stages: interpolator checkpoint was "
                               "trained under a different experiment config");
    for (auto& p : interp_net->parameters()) p.set_requires_grad(false);
    UNetInterpolator interp(interp_net);

    auto net = TimeConditionedUNet(cfg.forecastor_net);
    if (resuming) {
      auto [loaded, meta] = load_unet_checkpoint(cfg.train.resume_from, "forecastor", fingerprint);
      net = loaded;
      start_epoch = meta.epochs_completed;
      history = meta.loss_history;
    }
    UNetForecastor fc(net);
    torch::optim::Adam optimizer(net->parameters(), cfg.train.learning_rate);
    log = run_training(
        cfg, ds, start_epoch, history, optimizer, gen,
        [&](SequenceBatch& batch, int epoch) {
          return train_forecastor_step(fc, interp, batch, epoch, cfg.lcb, cfg.composite, ds.spec,
                                       gen, cfg.class_weights, px);
        },
        [&](int epochs, const std::vector<double>& hist) {
          save_checkpoint(ckpt, *net,
                          make_meta(cfg, "forecastor", cfg.forecastor_net.to_json(), fingerprint,
                                    epochs, hist));
        },
        out);
  } else {
    auto net = ConvLSTM(cfg.convlstm);
    if (resuming) {
      auto [loaded, meta] = load_convlstm_checkpoint(cfg.train.resume_from, fingerprint);
      net = loaded;
      start_epoch = meta.epochs_completed;
      history = meta.loss_history;
    }
    const auto kind = convlstm_loss_kind(stage);
    torch::optim::Adam optimizer(net->parameters(), cfg.train.learning_rate);
    log = run_training(
        cfg, ds, start_epoch, history, optimizer, gen,
        [&](SequenceBatch& batch, int) {
          return train_convlstm_step(net, batch, kind, cfg.lcb, ds.spec, gen, cfg.class_weights,
                                     px);
        },
        [&](int epochs, const std::vector<double>& hist) {
          save_checkpoint(ckpt, *net,
                          make_meta(cfg, "convlstm", cfg.convlstm.to_json(), fingerprint, epochs,
                                    hist));
        },
        out);
  }

  write_stage_manifest(cfg, "train_" + stage, {ckpt.string()}, {},
                       {{"train_s", seconds_since(t0)}});
  out << "checkpoint: " << ckpt.string() << "\n";
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::vector<std::string>& models,
                 std::ostream& out) {
  const auto t0 = Clock::now();
  if (models.empty()) throw std::invalid_argument("cmd_evaluate: no models requested");
  auto run_dir = cfg.resolve(cfg.eval.output_dir);
  DirectoryLock lock(run_dir);

  auto ds = load_split(cfg, "test");
  if (ds.size() == 0) throw std::runtime_error("test split is empty");
  const auto fingerprint = ds.spec.fingerprint();
  const RandomConvExtractor px(cfg.eval.perceptual_seed);
  detail::ModelSet model_set(cfg, fingerprint);

  auto reports_dir = run_dir / "reports";
  fs::create_directories(reports_dir);

  std::vector<std::pair<std::string, MetricReport>> rows;
  std::vector<std::string> report_paths;
  for (const auto& tag : models) {
    ReportAccumulator acc;
    for (std::int64_t i = 0; i < ds.size(); ++i) {
      auto seq = ds.sequence(i);
      auto result = model_set.run(tag, seq, i);
      if (result.ensemble)
        acc.add(evaluate_rollout(*result.ensemble, seq, ds.spec, cfg.eval.thresholds, px));
      else
        acc.add(evaluate_rollout(*result.deterministic, seq, ds.spec, cfg.eval.thresholds, px));
    }
    auto report = acc.mean();
    auto path = reports_dir / (tag + ".json");
    std::ofstream f(path, std::ios::trunc);
    f << report.to_json().dump(2) << "\n";
    if (!f) throw std::runtime_error("cannot write report " + path.string());
    report_paths.push_back(path.string());
    rows.emplace_back(tag, std::move(report));
  }

  auto csv_path = reports_dir / "results.csv";
  write_results_csv(csv_path, rows);
  report_paths.push_back(csv_path.string());
  out << results_csv_string(rows);

  write_stage_manifest(cfg, "evaluate", {}, report_paths, {{"evaluate_s", seconds_since(t0)}});
  return 0;
}

}  // namespace nowcast
