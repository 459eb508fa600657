#include "nowcast/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "nowcast/hashing.hpp"
#include "nowcast/rng.hpp"

namespace nowcast {

NormalizationSpec NormalizationSpec::analytic(double clip_max) {
  NormalizationSpec spec;
  spec.clip_max = clip_max;
  spec.log_offset = 1.0;
  spec.minmax_lo = 0.0;
  spec.minmax_hi = std::log1p(clip_max);
  return spec;
}

void NormalizationSpec::validate() const {
  if (!(clip_max > 0.0)) throw std::invalid_argument("NormalizationSpec: clip_max must be > 0");
  if (!(log_offset > 0.0)) throw std::invalid_argument("NormalizationSpec: log_offset must be > 0");
  if (!(minmax_hi > minmax_lo))
    throw std::invalid_argument("NormalizationSpec: minmax_hi must exceed minmax_lo");
}

nlohmann::json NormalizationSpec::to_json() const {
  return {{"clip_max", clip_max},
          {"log_offset", log_offset},
          {"minmax_lo", minmax_lo},
          {"minmax_hi", minmax_hi}};
}

NormalizationSpec NormalizationSpec::from_json(const nlohmann::json& j) {
  NormalizationSpec spec;
  spec.clip_max = j.at("clip_max").get<double>();
  spec.log_offset = j.at("log_offset").get<double>();
  spec.minmax_lo = j.at("minmax_lo").get<double>();
  spec.minmax_hi = j.at("minmax_hi").get<double>();
  spec.validate();
  return spec;
}

std::string NormalizationSpec::fingerprint() const { return fnv1a_hex(to_json().dump()); }

torch::Tensor forward_transform(const torch::Tensor& x, const NormalizationSpec& spec) {
  spec.validate();
  if (x.numel() > 0 && x.min().item<double>() < 0.0)
    throw std::invalid_argument("forward_transform: negative rain rates");
  auto clipped = torch::clamp_max(x, spec.clip_max);
  torch::Tensor logged = spec.log_offset == 1.0 ? torch::log1p(clipped)
                                                : torch::log(clipped + spec.log_offset);
  auto y = (logged - spec.minmax_lo) / (spec.minmax_hi - spec.minmax_lo);
  return torch::clamp(y, 0.0, 1.0);
}

double forward_transform(double x, const NormalizationSpec& spec) {
  spec.validate();
  if (x < 0.0) throw std::invalid_argument("forward_transform: negative rain rate");
  double clipped = std::min(x, spec.clip_max);
  double logged = spec.log_offset == 1.0 ? std::log1p(clipped) : std::log(clipped + spec.log_offset);
  double y = (logged - spec.minmax_lo) / (spec.minmax_hi - spec.minmax_lo);
  return std::clamp(y, 0.0, 1.0);
}

torch::Tensor inverse_transform(const torch::Tensor& y, const NormalizationSpec& spec) {
  spec.validate();
  if (y.numel() > 0) {
    double lo = y.min().item<double>(), hi = y.max().item<double>();
    if (lo < -kNormalizedInputTolerance || hi > 1.0 + kNormalizedInputTolerance)
      throw std::invalid_argument("inverse_transform: input outside [0, 1]");
  }
  auto clamped = torch::clamp(y, 0.0, 1.0);
  auto logged = clamped * (spec.minmax_hi - spec.minmax_lo) + spec.minmax_lo;
  torch::Tensor x = spec.log_offset == 1.0 ? torch::expm1(logged)
                                           : torch::exp(logged) - spec.log_offset;
  return torch::clamp_min(x, 0.0);
}

double inverse_transform(double y, const NormalizationSpec& spec) {
  spec.validate();
  if (y < -kNormalizedInputTolerance || y > 1.0 + kNormalizedInputTolerance)
    throw std::invalid_argument("inverse_transform: input outside [0, 1]");
  double clamped = std::clamp(y, 0.0, 1.0);
  double logged = clamped * (spec.minmax_hi - spec.minmax_lo) + spec.minmax_lo;
  double x = spec.log_offset == 1.0 ? std::expm1(logged) : std::exp(logged) - spec.log_offset;
  return std::max(x, 0.0);
}

std::vector<RainField> crop_boxes(const RainField& field, const std::vector<CropBox>& boxes) {
  const auto h = field.values.size(0), w = field.values.size(1);
  std::vector<RainField> out;
  out.reserve(boxes.size());
  for (const auto& box : boxes) {
    if (box.row < 0 || box.col < 0 || box.row + kGridBoxSize > h || box.col + kGridBoxSize > w) {
      std::ostringstream os;
      os << "crop_boxes: box (" << box.row << ", " << box.col << ") outside " << h << "x" << w
         << " grid";
      throw std::out_of_range(os.str());
    }
    RainField crop;
    crop.values = field.values
                      .index({torch::indexing::Slice(box.row, box.row + kGridBoxSize),
                              torch::indexing::Slice(box.col, box.col + kGridBoxSize)})
                      .clone();
    crop.timestamp = field.timestamp;
    auto frac = [](double a, double b, double t) { return a + (b - a) * t; };
    crop.bbox.lat_min = frac(field.bbox.lat_min, field.bbox.lat_max, double(box.row) / h);
    crop.bbox.lat_max = frac(field.bbox.lat_min, field.bbox.lat_max, double(box.row + kGridBoxSize) / h);
    crop.bbox.lon_min = frac(field.bbox.lon_min, field.bbox.lon_max, double(box.col) / w);
    crop.bbox.lon_max = frac(field.bbox.lon_min, field.bbox.lon_max, double(box.col + kGridBoxSize) / w);
    out.push_back(std::move(crop));
  }
  return out;
}

std::vector<RainSequence> window_sequences(const std::vector<RainField>& frames,
                                           const NormalizationSpec& spec, int horizon,
                                           int stride, int context) {
  if (horizon < 1) throw std::invalid_argument("window_sequences: horizon must be >= 1");
  if (context < 1) throw std::invalid_argument("window_sequences: context must be >= 1");
  if (stride < 1) throw std::invalid_argument("window_sequences: stride must be >= 1");
  const int span = context + horizon;
  if (static_cast<int>(frames.size()) < span) {
    std::ostringstream os;
    os << "window_sequences: need at least " << span << " frames, got " << frames.size();
    throw std::invalid_argument(os.str());
  }

  std::vector<RainSequence> out;
  for (std::size_t start = 0; start + span <= frames.size(); start += stride) {
    bool contiguous = true;
    for (int k = 1; k < span; ++k) {
      if (frames[start + k].timestamp - frames[start + k - 1].timestamp != kFrameIntervalSeconds) {
        contiguous = false;
        break;
      }
    }
    if (!contiguous) continue;

    std::vector<torch::Tensor> stack;
    stack.reserve(span);
    for (int k = 0; k < span; ++k)
      stack.push_back(forward_transform(frames[start + k].values, spec).unsqueeze(0));
    RainSequence seq;
    seq.frames = torch::stack(stack, 0);  // (S, 1, H, W)
    seq.start_time = frames[start].timestamp;
    seq.context = context;
    seq.spec = spec;
    out.push_back(std::move(seq));
  }
  return out;
}

int count_gaps(const std::vector<RainField>& frames) {
  int gaps = 0;
  for (std::size_t i = 1; i < frames.size(); ++i)
    if (frames[i].timestamp - frames[i - 1].timestamp != kFrameIntervalSeconds) ++gaps;
  return gaps;
}

void SyntheticConfig::validate() const {
  if (n_sequences < 1) throw std::invalid_argument("SyntheticConfig: n_sequences must be >= 1");
  if (n_blobs < 1) throw std::invalid_argument("SyntheticConfig: n_blobs must be >= 1");
  if (size < 8) throw std::invalid_argument("SyntheticConfig: size must be >= 8");
  if (horizon < 2) throw std::invalid_argument("SyntheticConfig: horizon must be >= 2");
  if (context < 1) throw std::invalid_argument("SyntheticConfig: context must be >= 1");
  if (growth_rate <= -1.0) throw std::invalid_argument("SyntheticConfig: growth_rate must be > -1");
  spec.validate();
}

nlohmann::json SyntheticConfig::to_json() const {
  return {{"seed", seed},
          {"n_sequences", n_sequences},
          {"n_blobs", n_blobs},
          {"advection_velocity", advection_velocity},
          {"growth_rate", growth_rate},
          {"size", size},
          {"horizon", horizon},
          {"context", context},
          {"normalization", spec.to_json()}};
}

SyntheticConfig SyntheticConfig::from_json(const nlohmann::json& j) {
  SyntheticConfig cfg;
  cfg.seed = j.value("seed", cfg.seed);
  cfg.n_sequences = j.value("n_sequences", cfg.n_sequences);
  cfg.n_blobs = j.value("n_blobs", cfg.n_blobs);
  if (j.contains("advection_velocity")) {
    auto v = j.at("advection_velocity");
    cfg.advection_velocity = {v.at(0).get<double>(), v.at(1).get<double>()};
  }
  cfg.growth_rate = j.value("growth_rate", cfg.growth_rate);
  cfg.size = j.value("size", cfg.size);
  cfg.horizon = j.value("horizon", cfg.horizon);
  cfg.context = j.value("context", cfg.context);
  if (j.contains("normalization")) cfg.spec = NormalizationSpec::from_json(j.at("normalization"));
  cfg.validate();
  return cfg;
}

namespace {

// Peak rain rates are drawn band by band so every weight class of the
// rainfall weight table appears in the dataset.
constexpr double kBandEdges[] = {0.2, 0.5, 2.0, 6.0, 10.0, 18.0, 30.0, 60.0};
constexpr int kBandCount = 7;

}  // namespace

std::vector<RainSequence> synth_advection(const SyntheticConfig& cfg) {
  cfg.validate();
  const int span = cfg.context + cfg.horizon;
  const auto opts = torch::TensorOptions().dtype(torch::kFloat32);

  auto rows = torch::arange(cfg.size, opts).reshape({cfg.size, 1});
  auto cols = torch::arange(cfg.size, opts).reshape({1, cfg.size});

  // 2020-01-01T00:00:00Z; sequences are laid out back to back so the
  // chronological split is well defined.
  constexpr std::int64_t kEpochStart = 1577836800;

  SplitMix rng(cfg.seed);
  std::vector<RainSequence> out;
  out.reserve(cfg.n_sequences);
  for (int s = 0; s < cfg.n_sequences; ++s) {
    struct Blob {
      double row, col, sigma, peak;
    };
    std::vector<Blob> blobs(cfg.n_blobs);
    for (int b = 0; b < cfg.n_blobs; ++b) {
      const int band = (s * cfg.n_blobs + b) % kBandCount;
      blobs[b].row = rng.uniform(cfg.size * 0.2, cfg.size * 0.8);
      blobs[b].col = rng.uniform(cfg.size * 0.2, cfg.size * 0.8);
      blobs[b].sigma = rng.uniform(cfg.size / 16.0, cfg.size / 8.0);
      blobs[b].peak = rng.uniform(kBandEdges[band], kBandEdges[band + 1]);
    }

    std::vector<torch::Tensor> frames;
    frames.reserve(span);
    for (int k = 0; k < span; ++k) {
      auto field = torch::zeros({cfg.size, cfg.size}, opts);
      const double growth = std::pow(1.0 + cfg.growth_rate, k);
      for (const auto& blob : blobs) {
        const double cr = blob.row + k * cfg.advection_velocity[1];
        const double cc = blob.col + k * cfg.advection_velocity[0];
        auto d2 = (rows - cr).pow(2) + (cols - cc).pow(2);
        field += static_cast<float>(blob.peak * growth) *
                 torch::exp(-d2 / static_cast<float>(2.0 * blob.sigma * blob.sigma));
      }
      field = torch::clamp(field, 0.0, cfg.spec.clip_max);
      frames.push_back(forward_transform(field, cfg.spec).unsqueeze(0));
    }

    RainSequence seq;
    seq.frames = torch::stack(frames, 0);
    seq.start_time = kEpochStart + static_cast<std::int64_t>(s) * span * kFrameIntervalSeconds;
    seq.context = cfg.context;
    seq.spec = cfg.spec;
    out.push_back(std::move(seq));
  }
  return out;
}

RainSequence SequenceDataset::sequence(std::int64_t i) const {
  if (i < 0 || i >= size()) throw std::out_of_range("SequenceDataset: index out of range");
  RainSequence seq;
  seq.frames = sequences[i];
  seq.start_time = timestamps[i][0].item<std::int64_t>();
  seq.context = context;
  seq.spec = spec;
  return seq;
}

SequenceDataset SequenceDataset::from_sequences(const std::vector<RainSequence>& seqs) {
  if (seqs.empty()) throw std::invalid_argument("SequenceDataset: no sequences");
  const auto fp = seqs.front().spec.fingerprint();
  std::vector<torch::Tensor> frames, times;
  frames.reserve(seqs.size());
  for (const auto& s : seqs) {
    if (s.context != seqs.front().context)
      throw std::invalid_argument("SequenceDataset: mixed context lengths");
    if (s.spec.fingerprint() != fp)
      throw std::invalid_argument("SequenceDataset: mixed normalization specs");
    frames.push_back(s.frames);
    times.push_back(torch::arange(s.frames.size(0), torch::kInt64) * kFrameIntervalSeconds +
                    s.start_time);
  }
  SequenceDataset ds;
  ds.sequences = torch::stack(frames, 0);
  ds.timestamps = torch::stack(times, 0);
  ds.context = seqs.front().context;
  ds.spec = seqs.front().spec;
  return ds;
}

std::array<SequenceDataset, 3> SequenceDataset::split(double train, double val, double test) const {
  if (std::abs(train + val + test - 1.0) > 1e-6)
    throw std::invalid_argument("SequenceDataset::split: fractions must sum to 1");
  const auto n = size();
  std::vector<std::int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    return timestamps[a][0].item<std::int64_t>() < timestamps[b][0].item<std::int64_t>();
  });

  const auto n_train = static_cast<std::int64_t>(std::llround(train * n));
  const auto n_val = static_cast<std::int64_t>(std::llround(val * n));
  auto take = [&](std::int64_t begin, std::int64_t end) {
    SequenceDataset part;
    part.context = context;
    part.spec = spec;
    std::vector<std::int64_t> idx(order.begin() + begin, order.begin() + end);
    auto sel = torch::tensor(idx, torch::kInt64);
    part.sequences = sequences.index_select(0, sel);
    part.timestamps = timestamps.index_select(0, sel);
    return part;
  };
  return {take(0, n_train), take(n_train, n_train + n_val), take(n_train + n_val, n)};
}

namespace {
constexpr char kDatasetMagic[8] = {'N', 'W', 'C', 'D', 'S', '0', '0', '1'};
}

void save_dataset(const std::filesystem::path& path, const SequenceDataset& ds) {
  if (ds.sequences.dim() != 5) throw std::invalid_argument("save_dataset: expected (N,S,C,H,W)");
  auto seq = ds.sequences.to(torch::kFloat32).contiguous();
  auto times = ds.timestamps.to(torch::kInt64).contiguous();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("save_dataset: cannot open " + path.string());
  f.write(kDatasetMagic, sizeof(kDatasetMagic));
  std::int64_t dims[5];
  for (int i = 0; i < 5; ++i) dims[i] = seq.size(i);
  f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  f.write(reinterpret_cast<const char*>(seq.data_ptr<float>()),
          static_cast<std::streamsize>(seq.numel() * sizeof(float)));
  f.write(reinterpret_cast<const char*>(times.data_ptr<std::int64_t>()),
          static_cast<std::streamsize>(times.numel() * sizeof(std::int64_t)));
  if (!f) throw std::runtime_error("save_dataset: write failed for " + path.string());
  f.close();

  nlohmann::json sidecar = {{"format", std::string(kDatasetMagic, sizeof(kDatasetMagic))},
                            {"context", ds.context},
                            {"cadence_seconds", kFrameIntervalSeconds},
                            {"normalization", ds.spec.to_json()}};
  std::ofstream js(path.string() + ".json", std::ios::trunc);
  js << sidecar.dump(2) << "\n";
  if (!js) throw std::runtime_error("save_dataset: sidecar write failed");
}

SequenceDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_dataset: cannot open " + path.string());
  char magic[8];
  f.read(magic, sizeof(magic));
  if (std::memcmp(magic, kDatasetMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_dataset: bad magic in " + path.string());
  std::int64_t dims[5];
  f.read(reinterpret_cast<char*>(dims), sizeof(dims));
  auto seq = torch::empty({dims[0], dims[1], dims[2], dims[3], dims[4]}, torch::kFloat32);
  f.read(reinterpret_cast<char*>(seq.data_ptr<float>()),
         static_cast<std::streamsize>(seq.numel() * sizeof(float)));
  auto times = torch::empty({dims[0], dims[1]}, torch::kInt64);
  f.read(reinterpret_cast<char*>(times.data_ptr<std::int64_t>()),
         static_cast<std::streamsize>(times.numel() * sizeof(std::int64_t)));
  if (!f) throw std::runtime_error("load_dataset: truncated file " + path.string());

  std::ifstream js(path.string() + ".json");
  if (!js) throw std::runtime_error("load_dataset: missing sidecar " + path.string() + ".json");
  nlohmann::json sidecar = nlohmann::json::parse(js);

  SequenceDataset ds;
  ds.sequences = seq;
  ds.timestamps = times;
  ds.context = sidecar.at("context").get<int>();
  ds.spec = NormalizationSpec::from_json(sidecar.at("normalization"));
  return ds;
}

}  // namespace nowcast
