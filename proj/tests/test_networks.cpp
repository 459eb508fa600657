#include "testing.hpp"

#include "nowcast/networks.hpp"
#include "test_util.hpp"

using namespace nowcast;

namespace {

UNetConfig tiny_unet() {
  UNetConfig cfg;
  cfg.base_channels = 8;
  cfg.depth = 2;
  cfg.time_embedding_dim = 16;
  return cfg;
}

ConvLSTMConfig tiny_convlstm() {
  ConvLSTMConfig cfg;
  cfg.hidden_channels = 8;
  cfg.kernel = 3;
  return cfg;
}

}  // namespace

TEST_SUITE("networks") {

TEST_CASE("mc_dropout mask control") {
  auto gen = at::detail::createCPUGenerator(4);
  auto x = torch::ones({2, 3, 8, 8});

  CHECK(torch::equal(mc_dropout(x, 0.0, true, &gen), x));
  CHECK(torch::equal(mc_dropout(x, 0.5, false, nullptr), x));
  CHECK_THROWS(mc_dropout(x, 0.5, true, nullptr));

  auto state = gen.get_state();
  auto a = mc_dropout(x, 0.5, true, &gen);
  gen.set_state(state);
  auto b = mc_dropout(x, 0.5, true, &gen);
  CHECK(torch::equal(a, b));  // same stream state, same mask
  auto c = mc_dropout(x, 0.5, true, &gen);
  CHECK_FALSE(torch::equal(a, c));  // advanced stream, fresh mask
}

TEST_CASE("unet shape contract at 64 and 128") {
  torch::manual_seed(0);
  auto net = TimeConditionedUNet(tiny_unet());
  for (std::int64_t hw : {64, 128}) {
    auto x = torch::rand({2, 1, hw, hw});
    auto t = torch::tensor({0.25f, 0.75f});
    auto y = net->forward(x, x, t);
    CHECK(y.sizes() == x.sizes());
    CHECK(y.min().item<float>() > 0.0f);
    CHECK(y.max().item<float>() < 1.0f);
  }
}

TEST_CASE("unet rejects bad inputs") {
  torch::manual_seed(0);
  auto net = TimeConditionedUNet(tiny_unet());
  auto x = torch::rand({1, 1, 16, 16});
  CHECK_THROWS(net->forward(x, torch::rand({1, 1, 32, 32}), torch::tensor({0.5f})));
  CHECK_THROWS(net->forward(torch::rand({1, 1, 18, 18}), torch::rand({1, 1, 18, 18}),
                            torch::tensor({0.5f})));  // 18 not divisible by 2^depth
}

TEST_CASE("unet determinism without dropout, stochasticity with it") {
  torch::manual_seed(1);
  auto cfg = tiny_unet();
  cfg.dropout_rate = 0.3;
  auto net = TimeConditionedUNet(cfg);
  auto gen_x = at::detail::createCPUGenerator(9);
  auto x0 = torch::rand({2, 1, 16, 16}, gen_x);
  auto cond = torch::rand({2, 1, 16, 16}, gen_x);
  auto t = torch::tensor({0.5f, 0.25f});

  CHECK(torch::equal(net->forward(x0, cond, t, false, nullptr),
                     net->forward(x0, cond, t, false, nullptr)));

  auto g1 = at::detail::createCPUGenerator(100);
  auto g2 = at::detail::createCPUGenerator(101);
  auto ya = net->forward(x0, cond, t, true, &g1);
  auto yb = net->forward(x0, cond, t, true, &g2);
  CHECK_FALSE(torch::equal(ya, yb));  // distinct streams

  auto g3 = at::detail::createCPUGenerator(100);
  auto yc = net->forward(x0, cond, t, true, &g3);
  CHECK(torch::equal(ya, yc));  // same stream reproduces the pass
}

TEST_CASE("unet gradients are finite") {
  torch::manual_seed(2);
  auto net = TimeConditionedUNet(tiny_unet());
  auto x0 = torch::rand({2, 1, 16, 16});
  auto y = net->forward(x0, x0, torch::tensor({0.1f, 0.9f}));
  y.sum().backward();
  for (const auto& p : net->parameters()) {
    REQUIRE(p.grad().defined());
    CHECK(torch::isfinite(p.grad()).all().item<bool>());
  }
}

TEST_CASE("parameter counts are a pure function of the config") {
  torch::manual_seed(0);
  auto count = [](const torch::nn::Module& m) {
    std::int64_t n = 0;
    for (const auto& p : m.parameters()) n += p.numel();
    return n;
  };
  CHECK(count(*TimeConditionedUNet(UNetConfig{})) == 2775297);  // desk default
  CHECK(count(*ConvLSTM(ConvLSTMConfig{})) == 4929153);         // paper-scale stack
  ConvLSTMConfig small;
  small.hidden_channels = 32;
  CHECK(count(*ConvLSTM(small)) == 310689);
}

TEST_CASE("convlstm shape, determinism and context validation") {
  torch::manual_seed(3);
  auto net = ConvLSTM(tiny_convlstm());
  auto context = torch::rand({2, 4, 1, 16, 16});
  auto y = net->next_frame(context);
  CHECK(y.sizes() == c10::IntArrayRef({2, 1, 16, 16}));
  CHECK(torch::equal(y, net->next_frame(context)));
  CHECK(y.min().item<float>() > 0.0f);
  CHECK(y.max().item<float>() < 1.0f);
  CHECK_THROWS(net->next_frame(torch::rand({2, 3, 1, 16, 16})));
}

TEST_CASE("convlstm output depends on every context frame") {
  torch::manual_seed(4);
  auto net = ConvLSTM(tiny_convlstm());
  auto context = torch::rand({1, 4, 1, 16, 16}).set_requires_grad(true);
  net->next_frame(context).sum().backward();
  auto grads = context.grad();
  REQUIRE(grads.defined());
  for (int t = 0; t < 4; ++t)
    CHECK(grads.select(1, t).abs().sum().item<double>() > 0.0);  // temporal connectivity
}

TEST_CASE("convlstm pixel dropout reproducibility") {
  torch::manual_seed(5);
  auto cfg = tiny_convlstm();
  cfg.pixel_dropout = 0.4;
  auto net = ConvLSTM(cfg);
  auto context = torch::rand({1, 4, 1, 16, 16});
  auto g1 = at::detail::createCPUGenerator(7);
  auto g2 = at::detail::createCPUGenerator(7);
  CHECK(torch::equal(net->next_frame(context, true, &g1), net->next_frame(context, true, &g2)));
}

TEST_CASE("checkpoint round trip preserves behaviour and verifies meta") {
  auto dir = test_util::temp_dir("checkpoints");
  torch::manual_seed(6);
  auto net = TimeConditionedUNet(tiny_unet());
  auto spec = NormalizationSpec::analytic(100.0);

  CheckpointMeta meta;
  meta.kind = "interpolator";
  meta.net_config = net->cfg.to_json();
  meta.normspec_fingerprint = spec.fingerprint();
  meta.config_hash = "cafe";
  meta.epochs_completed = 3;
  meta.loss_history = {1.0, 0.5, 0.25};
  save_checkpoint(dir / "interp.pt", *net, meta);

  auto [loaded, loaded_meta] =
      load_unet_checkpoint(dir / "interp.pt", "interpolator", spec.fingerprint());
  CHECK(loaded_meta.epochs_completed == 3);
  CHECK(loaded_meta.loss_history.size() == 3);

  auto x = torch::rand({1, 1, 16, 16});
  auto t = torch::tensor({0.5f});
  CHECK(torch::equal(net->forward(x, x, t), loaded->forward(x, x, t)));

  CHECK_THROWS(load_unet_checkpoint(dir / "interp.pt", "forecastor", std::nullopt));
  CHECK_THROWS(load_unet_checkpoint(dir / "interp.pt", "interpolator",
                                    NormalizationSpec::analytic(50.0).fingerprint()));
}

TEST_CASE("config json round trips") {
  UNetConfig u;
  u.base_channels = 16;
  u.depth = 4;
  u.dropout_rate = 0.25;
  CHECK(UNetConfig::from_json(u.to_json()) == u);

  ConvLSTMConfig c;
  c.hidden_channels = 64;
  c.pixel_dropout = 0.4;
  CHECK(ConvLSTMConfig::from_json(c.to_json()) == c);

  UNetConfig bad;
  bad.time_embedding_dim = 7;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  ConvLSTMConfig even_kernel;
  even_kernel.kernel = 4;
  CHECK_THROWS_AS(even_kernel.validate(), std::invalid_argument);
}

}  // TEST_SUITE
