#include "nowcast/experiment.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <stdexcept>

#include "nowcast/hashing.hpp"

namespace nowcast {

namespace {

nlohmann::json layout_to_json(const GranuleLayout& l) {
  return {{"precipitation_path", l.precipitation_path},
          {"lat_path", l.lat_path},
          {"lon_path", l.lon_path},
          {"time_path", l.time_path},
          {"transpose", l.transpose}};
}

GranuleLayout layout_from_json(const nlohmann::json& j) {
  GranuleLayout l;
  l.precipitation_path = j.value("precipitation_path", l.precipitation_path);
  l.lat_path = j.value("lat_path", l.lat_path);
  l.lon_path = j.value("lon_path", l.lon_path);
  l.time_path = j.value("time_path", l.time_path);
  l.transpose = j.value("transpose", l.transpose);
  return l;
}

nlohmann::json data_to_json(const DataConfig& d) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : d.boxes) boxes.push_back({b.row, b.col});
  return {{"granule_dir", d.granule_dir},
          {"dataset_dir", d.dataset_dir},
          {"layout", layout_to_json(d.layout)},
          {"boxes", boxes},
          {"clip_max", d.clip_max},
          {"horizon", d.horizon},
          {"stride", d.stride},
          {"context", d.context},
          {"split", {d.split_train, d.split_val, d.split_test}},
          {"synthetic", d.synthetic.to_json()}};
}

DataConfig data_from_json(const nlohmann::json& j) {
  DataConfig d;
  d.granule_dir = j.value("granule_dir", d.granule_dir);
  d.dataset_dir = j.value("dataset_dir", d.dataset_dir);
  if (j.contains("layout")) d.layout = layout_from_json(j.at("layout"));
  if (j.contains("boxes")) {
    d.boxes.clear();
    for (const auto& b : j.at("boxes"))
      d.boxes.push_back({b.at(0).get<std::int64_t>(), b.at(1).get<std::int64_t>()});
  }
  d.clip_max = j.value("clip_max", d.clip_max);
  d.horizon = j.value("horizon", d.horizon);
  d.stride = j.value("stride", d.stride);
  d.context = j.value("context", d.context);
  if (j.contains("split")) {
    auto s = j.at("split");
    d.split_train = s.at(0).get<double>();
    d.split_val = s.at(1).get<double>();
    d.split_test = s.at(2).get<double>();
  }
  if (j.contains("synthetic")) d.synthetic = SyntheticConfig::from_json(j.at("synthetic"));
  return d;
}

nlohmann::json train_to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"seed", t.seed},
          {"checkpoint_every", t.checkpoint_every},
          {"resume_from", t.resume_from}};
}

TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.seed = j.value("seed", t.seed);
  t.checkpoint_every = j.value("checkpoint_every", t.checkpoint_every);
  t.resume_from = j.value("resume_from", t.resume_from);
  if (t.epochs < 1) throw std::invalid_argument("train.epochs must be >= 1");
  if (t.batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
  if (!(t.learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be > 0");
  return t;
}

nlohmann::json eval_to_json(const EvalConfig& e) {
  return {{"members", e.members},
          {"thresholds", e.thresholds},
          {"output_dir", e.output_dir},
          {"perceptual_seed", e.perceptual_seed}};
}

EvalConfig eval_from_json(const nlohmann::json& j) {
  EvalConfig e;
  e.members = j.value("members", e.members);
  e.thresholds = j.value("thresholds", e.thresholds);
  e.output_dir = j.value("output_dir", e.output_dir);
  e.perceptual_seed = j.value("perceptual_seed", e.perceptual_seed);
  if (e.members < 1) throw std::invalid_argument("eval.members must be >= 1");
  return e;
}

}  // namespace

nlohmann::json ExperimentConfig::to_json() const {
  return {{"data", data_to_json(data)},
          {"loss",
           {{"lcb", lcb.to_json()},
            {"composite", composite.to_json()},
            {"class_weights", class_weights.to_json()}}},
          {"model",
           {{"interpolator", interpolator_net.to_json()},
            {"forecastor", forecastor_net.to_json()},
            {"convlstm", convlstm.to_json()}}},
          {"train", train_to_json(train)},
          {"eval", eval_to_json(eval)}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  if (j.contains("data")) cfg.data = data_from_json(j.at("data"));
  if (j.contains("loss")) {
    const auto& loss = j.at("loss");
    if (loss.contains("lcb")) cfg.lcb = LcbConfig::from_json(loss.at("lcb"));
    if (loss.contains("composite"))
      cfg.composite = CompositeLossConfig::from_json(loss.at("composite"));
    if (loss.contains("class_weights"))
      cfg.class_weights = ClassWeightTable::from_json(loss.at("class_weights"));
  }
  if (j.contains("model")) {
    const auto& model = j.at("model");
    if (model.contains("interpolator"))
      cfg.interpolator_net = UNetConfig::from_json(model.at("interpolator"));
    if (model.contains("forecastor"))
      cfg.forecastor_net = UNetConfig::from_json(model.at("forecastor"));
    if (model.contains("convlstm")) cfg.convlstm = ConvLSTMConfig::from_json(model.at("convlstm"));
  }
  if (j.contains("train")) cfg.train = train_from_json(j.at("train"));
  if (j.contains("eval")) cfg.eval = eval_from_json(j.at("eval"));
  return cfg;
}

ExperimentConfig ExperimentConfig::preset(const std::string& name) {
  ExperimentConfig cfg;
  if (name == "synth") {
    cfg.data.dataset_dir = "data/synth";
    cfg.data.horizon = 8;
    cfg.data.context = 4;
    cfg.data.synthetic.seed = 7;
    cfg.data.synthetic.n_sequences = 160;
    cfg.data.synthetic.n_blobs = 3;
    cfg.data.synthetic.size = 64;
    cfg.data.synthetic.horizon = 8;
    cfg.data.synthetic.context = 4;
    cfg.data.synthetic.advection_velocity = {1.5, 0.5};
    cfg.data.synthetic.growth_rate = 0.02;
    cfg.interpolator_net.base_channels = 32;
    cfg.interpolator_net.depth = 3;
    cfg.interpolator_net.dropout_rate = 0.2;
    cfg.forecastor_net.base_channels = 32;
    cfg.forecastor_net.depth = 3;
    cfg.forecastor_net.dropout_rate = 0.0;
    cfg.convlstm.hidden_channels = 32;
    cfg.convlstm.pixel_dropout = 0.15;
    cfg.train.epochs = 10;
    cfg.train.batch_size = 8;
    cfg.eval.members = 5;
    cfg.eval.output_dir = "runs/synth";
  } else if (name == "full") {
    cfg.data.dataset_dir = "data/full";
    cfg.data.horizon = 8;
    cfg.data.context = 4;
    cfg.interpolator_net.base_channels = 64;
    cfg.interpolator_net.depth = 4;
    cfg.interpolator_net.dropout_rate = 0.2;
    cfg.forecastor_net.base_channels = 64;
    cfg.forecastor_net.depth = 4;
    cfg.forecastor_net.dropout_rate = 0.0;
    cfg.convlstm.hidden_channels = 128;
    cfg.train.epochs = 60;
    cfg.train.batch_size = 8;
    cfg.eval.members = 10;
    cfg.eval.output_dir = "runs/full";
  } else {
    throw std::invalid_argument("unknown preset '" + name + "' (expected synth or full)");
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::optional<std::filesystem::path>& config_path,
                                        const std::optional<std::string>& preset_name,
                                        std::optional<std::uint64_t> seed_override) {
  ExperimentConfig base = preset_name ? preset(*preset_name) : ExperimentConfig{};
  nlohmann::json merged = base.to_json();
  if (config_path) {
    std::ifstream f(*config_path);
    if (!f) throw std::runtime_error("cannot open config file " + config_path->string());
    merged.merge_patch(nlohmann::json::parse(f));
  }
  auto cfg = from_json(merged);
  if (seed_override) cfg.train.seed = *seed_override;
  return cfg;
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(to_json().dump()); }

std::filesystem::path ExperimentConfig::resolve(const std::string& rel) const {
  std::filesystem::path p(rel);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("NOWCAST_DATA_ROOT")) return std::filesystem::path(root) / p;
  return p;
}

nlohmann::json RunManifest::to_json() const {
  return {{"config_hash", config_hash}, {"code_version", code_version},
          {"stage", stage},            {"checkpoints", checkpoints},
          {"reports", reports},        {"timings_s", timings_s}};
}

void RunManifest::write(const std::filesystem::path& path) const {
  const std::string contents = to_json().dump(2) + "\n";
  if (std::filesystem::exists(path)) {
    // Manifests are immutable: a rerun may only reproduce the exact record it
    // would have written the first time (timings differ run to run and are
    // not part of the immutability contract).
    auto existing = read(path);
    auto a = existing.to_json();
    auto b = to_json();
    a.erase("timings_s");
    b.erase("timings_s");
    if (a != b)
      throw std::runtime_error("manifest " + path.string() +
                               " already exists with different contents; refusing to overwrite");
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write manifest " + path.string());
  f << contents;
}

RunManifest RunManifest::read(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read manifest " + path.string());
  auto j = nlohmann::json::parse(f);
  RunManifest m;
  m.config_hash = j.value("config_hash", "");
  m.code_version = j.value("code_version", "");
  m.stage = j.value("stage", "");
  m.checkpoints = j.value("checkpoints", std::vector<std::string>{});
  m.reports = j.value("reports", std::vector<std::string>{});
  m.timings_s = j.value("timings_s", std::map<std::string, double>{});
  return m;
}

DirectoryLock::DirectoryLock(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  lockfile_ = dir / ".nowcast.lock";
  int fd = ::open(lockfile_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0)
    throw std::runtime_error("output directory " + dir.string() +
                             " is locked by another invocation (remove " + lockfile_.string() +
                             " if stale)");
  auto pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  std::filesystem::remove(lockfile_, ec);
}

}  // namespace nowcast
