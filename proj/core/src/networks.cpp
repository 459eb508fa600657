#include "nowcast/networks.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace nowcast {

torch::Tensor mc_dropout(const torch::Tensor& x, double p, bool on, torch::Generator* gen) {
  if (!on || p <= 0.0) return x;
  TORCH_CHECK(p < 1.0, "mc_dropout: rate must be < 1");
  TORCH_CHECK(gen != nullptr, "mc_dropout: an RNG stream is required when dropout is on");
  auto mask = (torch::rand(x.sizes(), *gen, x.options().requires_grad(false)) >= p).to(x.dtype());
  return x * mask / (1.0 - p);
}

namespace {

// Pixel-wise variant: one mask per spatial location, shared across channels.
torch::Tensor mc_pixel_dropout(const torch::Tensor& x, double p, bool on, torch::Generator* gen) {
  if (!on || p <= 0.0) return x;
  TORCH_CHECK(p < 1.0, "mc_pixel_dropout: rate must be < 1");
  TORCH_CHECK(gen != nullptr, "mc_pixel_dropout: an RNG stream is required when dropout is on");
  auto sizes = x.sizes().vec();
  sizes[1] = 1;
  auto mask = (torch::rand(sizes, *gen, x.options().requires_grad(false)) >= p).to(x.dtype());
  return x * mask / (1.0 - p);
}

int norm_groups(int channels) {
  for (int g = std::min(8, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

// Sinusoidal embedding of a [0,1] index; `dim` must be even.
torch::Tensor sinusoidal_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  auto opts = t.options();
  auto k = torch::arange(half, opts);
  auto freqs = torch::exp(k * (-std::log(10000.0) / std::max(half - 1, 1)));
  auto args = t.reshape({-1, 1}) * 1000.0 * freqs.reshape({1, -1});
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

}  // namespace

void UNetConfig::validate() const {
  if (in_frames < 1) throw std::invalid_argument("UNetConfig: in_frames must be >= 1");
  if (base_channels < 8) throw std::invalid_argument("UNetConfig: base_channels must be >= 8");
  if (depth < 1) throw std::invalid_argument("UNetConfig: depth must be >= 1");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw std::invalid_argument("UNetConfig: dropout_rate must be in [0, 1)");
  if (time_embedding_dim < 2 || time_embedding_dim % 2 != 0)
    throw std::invalid_argument("UNetConfig: time_embedding_dim must be even and >= 2");
}

nlohmann::json UNetConfig::to_json() const {
  return {{"in_frames", in_frames},
          {"base_channels", base_channels},
          {"depth", depth},
          {"dropout_rate", dropout_rate},
          {"time_embedding_dim", time_embedding_dim}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig cfg;
  cfg.in_frames = j.value("in_frames", cfg.in_frames);
  cfg.base_channels = j.value("base_channels", cfg.base_channels);
  cfg.depth = j.value("depth", cfg.depth);
  cfg.dropout_rate = j.value("dropout_rate", cfg.dropout_rate);
  cfg.time_embedding_dim = j.value("time_embedding_dim", cfg.time_embedding_dim);
  cfg.validate();
  return cfg;
}

ConvBlockImpl::ConvBlockImpl(int in_channels, int out_channels, int time_dim, double dropout_)
    : dropout(dropout_) {
  conv_a = register_module(
      "conv_a", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  conv_b = register_module(
      "conv_b", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  norm_a = register_module("norm_a",
                           torch::nn::GroupNorm(norm_groups(out_channels), out_channels));
  norm_b = register_module("norm_b",
                           torch::nn::GroupNorm(norm_groups(out_channels), out_channels));
  time_proj = register_module("time_proj", torch::nn::Linear(time_dim, out_channels));
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& time_emb,
                                     bool dropout_on, torch::Generator* gen) {
  auto h = torch::silu(norm_a(conv_a(x)));
  h = h + time_proj(time_emb).unsqueeze(-1).unsqueeze(-1);
  h = torch::silu(norm_b(conv_b(h)));
  return mc_dropout(h, dropout, dropout_on, gen);
}

TimeConditionedUNetImpl::TimeConditionedUNetImpl(UNetConfig cfg_) : cfg(cfg_) {
  cfg.validate();
  const int td = cfg.time_embedding_dim;
  stem_ = register_module(
      "stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.in_frames, cfg.base_channels, 3).padding(1)));
  time_fc1_ = register_module("time_fc1", torch::nn::Linear(td, td));
  time_fc2_ = register_module("time_fc2", torch::nn::Linear(td, td));

  int ch = cfg.base_channels;
  for (int i = 0; i < cfg.depth; ++i) {
    encoder_.push_back(ConvBlock(ch, ch, td, cfg.dropout_rate));
    register_module("enc" + std::to_string(i), encoder_.back());
    down_.push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch * 2, 3).stride(2).padding(1)));
    register_module("down" + std::to_string(i), down_.back());
    ch *= 2;
  }
  mid_ = ConvBlock(ch, ch, td, cfg.dropout_rate);
  register_module("mid", mid_);
  for (int i = cfg.depth - 1; i >= 0; --i) {
    up_.push_back(torch::nn::ConvTranspose2d(
        torch::nn::ConvTranspose2dOptions(ch, ch / 2, 2).stride(2)));
    register_module("up" + std::to_string(i), up_.back());
    ch /= 2;
    decoder_.push_back(ConvBlock(ch * 2, ch, td, cfg.dropout_rate));
    register_module("dec" + std::to_string(i), decoder_.back());
  }
  head_a_ = register_module(
      "head_a", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).padding(1)));
  head_b_ = register_module("head_b", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 1, 1)));
}

torch::Tensor TimeConditionedUNetImpl::forward(const torch::Tensor& x0, const torch::Tensor& cond,
                                               const torch::Tensor& time_index, bool dropout_on,
                                               torch::Generator* gen) {
  TORCH_CHECK(x0.dim() == 4 && cond.dim() == 4, "unet: inputs must be (B, C, H, W)");
  TORCH_CHECK(x0.sizes().equals(cond.sizes()), "unet: x0 and conditioning frame shapes differ");
  const auto h_in = x0.size(2), w_in = x0.size(3);
  const std::int64_t div = 1LL << cfg.depth;
  TORCH_CHECK(h_in % div == 0 && w_in % div == 0,
              "unet: spatial dims must be divisible by 2^depth");
  auto t = time_index.dim() == 0 ? time_index.reshape({1}).expand({x0.size(0)}) : time_index;
  TORCH_CHECK(t.size(0) == x0.size(0), "unet: time_index batch mismatch");

  auto emb = time_fc2_(torch::silu(time_fc1_(
      sinusoidal_embedding(t.to(x0.scalar_type()), cfg.time_embedding_dim))));

  auto h = stem_(torch::cat({x0, cond}, 1));
  std::vector<torch::Tensor> skips;
  for (int i = 0; i < cfg.depth; ++i) {
    h = encoder_[i]->forward(h, emb, dropout_on, gen);
    skips.push_back(h);
    h = down_[i](h);
  }
  h = mid_->forward(h, emb, dropout_on, gen);
  for (int i = 0; i < cfg.depth; ++i) {
    h = up_[i](h);
    h = torch::cat({h, skips[cfg.depth - 1 - i]}, 1);
    h = decoder_[i]->forward(h, emb, dropout_on, gen);
  }
  return torch::sigmoid(head_b_(torch::silu(head_a_(h))));
}

void ConvLSTMConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("ConvLSTMConfig: layers must be >= 1");
  if (hidden_channels < 1) throw std::invalid_argument("ConvLSTMConfig: hidden_channels must be >= 1");
  if (kernel < 1 || kernel % 2 == 0)
    throw std::invalid_argument("ConvLSTMConfig: kernel must be odd");
  if (pixel_dropout < 0.0 || pixel_dropout >= 1.0)
    throw std::invalid_argument("ConvLSTMConfig: pixel_dropout must be in [0, 1)");
  if (context_frames < 1)
    throw std::invalid_argument("ConvLSTMConfig: context_frames must be >= 1");
}

nlohmann::json ConvLSTMConfig::to_json() const {
  return {{"layers", layers},
          {"hidden_channels", hidden_channels},
          {"kernel", kernel},
          {"pixel_dropout", pixel_dropout},
          {"context_frames", context_frames}};
}

ConvLSTMConfig ConvLSTMConfig::from_json(const nlohmann::json& j) {
  ConvLSTMConfig cfg;
  cfg.layers = j.value("layers", cfg.layers);
  cfg.hidden_channels = j.value("hidden_channels", cfg.hidden_channels);
  cfg.kernel = j.value("kernel", cfg.kernel);
  cfg.pixel_dropout = j.value("pixel_dropout", cfg.pixel_dropout);
  cfg.context_frames = j.value("context_frames", cfg.context_frames);
  cfg.validate();
  return cfg;
}

ConvLSTMCellImpl::ConvLSTMCellImpl(int in_channels, int hidden_channels_, int kernel)
    : hidden_channels(hidden_channels_) {
  gates = register_module(
      "gates", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels + hidden_channels,
                                                          4 * hidden_channels, kernel)
                                     .padding(kernel / 2)));
}

std::pair<torch::Tensor, torch::Tensor> ConvLSTMCellImpl::forward(const torch::Tensor& x,
                                                                  const torch::Tensor& hidden,
                                                                  const torch::Tensor& cell) {
  auto chunks = gates(torch::cat({x, hidden}, 1)).chunk(4, 1);
  auto input_gate = torch::sigmoid(chunks[0]);
  auto forget_gate = torch::sigmoid(chunks[1]);
  auto candidate = torch::tanh(chunks[2]);
  auto output_gate = torch::sigmoid(chunks[3]);
  auto next_cell = forget_gate * cell + input_gate * candidate;
  auto next_hidden = output_gate * torch::tanh(next_cell);
  return {next_hidden, next_cell};
}

ConvLSTMImpl::ConvLSTMImpl(ConvLSTMConfig cfg_) : cfg(cfg_) {
  cfg.validate();
  int in_ch = 1;
  for (int l = 0; l < cfg.layers; ++l) {
    cells_.push_back(ConvLSTMCell(in_ch, cfg.hidden_channels, cfg.kernel));
    register_module("cell" + std::to_string(l), cells_.back());
    in_ch = cfg.hidden_channels;
  }
  head_ = register_module("head",
                          torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.hidden_channels, 1, 1)));
}

torch::Tensor ConvLSTMImpl::next_frame(const torch::Tensor& context, bool dropout_on,
                                       torch::Generator* gen) {
  TORCH_CHECK(context.dim() == 5, "convlstm: context must be (B, T, C, H, W)");
  TORCH_CHECK(context.size(1) == cfg.context_frames, "convlstm: expected ", cfg.context_frames,
              " context frames, got ", context.size(1));
  const auto b = context.size(0), h = context.size(3), w = context.size(4);
  auto opts = context.options();

  std::vector<torch::Tensor> hidden(cfg.layers), cell(cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    hidden[l] = torch::zeros({b, cfg.hidden_channels, h, w}, opts);
    cell[l] = torch::zeros({b, cfg.hidden_channels, h, w}, opts);
  }

  for (std::int64_t t = 0; t < context.size(1); ++t) {
    auto input = context.select(1, t);
    for (int l = 0; l < cfg.layers; ++l) {
      std::tie(hidden[l], cell[l]) = cells_[l]->forward(input, hidden[l], cell[l]);
      input = mc_pixel_dropout(hidden[l], cfg.pixel_dropout, dropout_on, gen);
    }
  }
  return torch::sigmoid(head_(hidden[cfg.layers - 1]));
}

nlohmann::json CheckpointMeta::to_json() const {
  return {{"kind", kind},
          {"net_config", net_config},
          {"normspec_fingerprint", normspec_fingerprint},
          {"config_hash", config_hash},
          {"epochs_completed", epochs_completed},
          {"loss_history", loss_history}};
}

CheckpointMeta CheckpointMeta::from_json(const nlohmann::json& j) {
  CheckpointMeta meta;
  meta.kind = j.at("kind").get<std::string>();
  meta.net_config = j.at("net_config");
  meta.normspec_fingerprint = j.value("normspec_fingerprint", "");
  meta.config_hash = j.value("config_hash", "");
  meta.epochs_completed = j.value("epochs_completed", 0);
  meta.loss_history = j.value("loss_history", std::vector<double>{});
  return meta;
}

void save_checkpoint(const std::filesystem::path& path, const torch::nn::Module& module,
                     const CheckpointMeta& meta) {
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.save_to(path.string());
  std::ofstream js(path.string() + ".json", std::ios::trunc);
  js << meta.to_json().dump(2) << "\n";
  if (!js) throw std::runtime_error("save_checkpoint: cannot write meta for " + path.string());
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream js(path.string() + ".json");
  if (!js)
    throw std::runtime_error("read_checkpoint_meta: missing meta file " + path.string() + ".json");
  return CheckpointMeta::from_json(nlohmann::json::parse(js));
}

namespace {

void verify_meta(const CheckpointMeta& meta, const std::string& expected_kind,
                 const std::optional<std::string>& expected_fingerprint,
                 const std::filesystem::path& path) {
  if (meta.kind != expected_kind)
    throw std::runtime_error("checkpoint " + path.string() + " holds a '" + meta.kind +
                             "' model, expected '" + expected_kind + "'");
  if (expected_fingerprint && meta.normspec_fingerprint != *expected_fingerprint)
    throw std::runtime_error("checkpoint " + path.string() +
                             ": NormalizationSpec fingerprint mismatch (checkpoint " +
                             meta.normspec_fingerprint + ", dataset " + *expected_fingerprint + ")");
}

}  // namespace

std::pair<TimeConditionedUNet, CheckpointMeta> load_unet_checkpoint(
    const std::filesystem::path& path, const std::string& expected_kind,
    const std::optional<std::string>& expected_fingerprint) {
  auto meta = read_checkpoint_meta(path);
  verify_meta(meta, expected_kind, expected_fingerprint, path);
  auto net = TimeConditionedUNet(UNetConfig::from_json(meta.net_config));
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  net->load(archive);
  return {net, meta};
}

std::pair<ConvLSTM, CheckpointMeta> load_convlstm_checkpoint(
    const std::filesystem::path& path, const std::optional<std::string>& expected_fingerprint) {
  auto meta = read_checkpoint_meta(path);
  verify_meta(meta, "convlstm", expected_fingerprint, path);
  auto net = ConvLSTM(ConvLSTMConfig::from_json(meta.net_config));
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  net->load(archive);
  return {net, meta};
}

}  // namespace nowcast
