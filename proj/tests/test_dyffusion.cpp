#include "testing.hpp"

#include <map>
#include <set>

#include "nowcast/dyffusion.hpp"
#include "stubs.hpp"

using namespace nowcast;

namespace {

// Random sequences in [0,1]: (B, S, 1, H, W).
torch::Tensor random_sequences(int b, int s, int hw, std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return torch::rand({b, s, 1, hw, hw}, gen);
}

SyntheticConfig smoke_config() {
  SyntheticConfig cfg;
  cfg.seed = 77;
  cfg.n_sequences = 20;
  cfg.size = 16;
  cfg.context = 1;
  cfg.horizon = 8;
  cfg.advection_velocity = {1.0, 0.0};
  return cfg;
}

UNetConfig tiny_unet(double dropout) {
  UNetConfig cfg;
  cfg.base_channels = 8;
  cfg.depth = 2;
  cfg.time_embedding_dim = 16;
  cfg.dropout_rate = dropout;
  return cfg;
}

}  // namespace

TEST_SUITE("dyffusion") {

TEST_CASE("sequence batch logs accesses and validates indices") {
  SequenceBatch batch(random_sequences(3, 9, 8, 1), 1);
  CHECK(batch.size() == 3);
  CHECK(batch.horizon() == 8);
  CHECK(batch.x0_index() == 0);

  batch.frame(0, FrameUse::kNetworkInput);
  batch.gather(torch::tensor({3L, 5L, 8L}), FrameUse::kLossTarget);
  CHECK(batch.accesses().size() == 6);
  CHECK(batch.accesses()[3].frame == 3);
  CHECK(batch.accesses()[4].frame == 5);
  CHECK(batch.accesses()[3].use == FrameUse::kLossTarget);

  CHECK_THROWS(batch.frame(9, FrameUse::kNetworkInput));
  CHECK_THROWS(batch.gather(torch::tensor({0L, 1L, 9L}), FrameUse::kLossTarget));
}

TEST_CASE("interpolate_with_endpoints bypasses the network at the boundaries") {
  auto seq = random_sequences(3, 9, 8, 2);
  stubs::OracleInterpolator interp(seq, 0);
  auto x0 = seq.select(1, 0);
  auto xh = seq.select(1, 8);
  auto gen = at::detail::createCPUGenerator(0);

  auto lo = interpolate_with_endpoints(interp, x0, xh, torch::zeros({3}, torch::kInt64), 8, true,
                                       &gen);
  CHECK(torch::equal(lo, x0));
  auto hi = interpolate_with_endpoints(interp, x0, xh, torch::full({3}, 8, torch::kInt64), 8, true,
                                       &gen);
  CHECK(torch::equal(hi, xh));

  // mixed batch: rows 0/2 take endpoints, row 1 takes the network
  auto mixed = interpolate_with_endpoints(interp, x0, xh, torch::tensor({0L, 4L, 8L}), 8, true,
                                          &gen);
  CHECK(torch::equal(mixed[0], x0[0]));
  CHECK(torch::equal(mixed[1], seq[1][4]));
  CHECK(torch::equal(mixed[2], xh[2]));

  CHECK_THROWS(interpolate_with_endpoints(interp, x0, xh, torch::tensor({0L, 4L, 9L}), 8, true,
                                          &gen));
}

TEST_CASE("stage 1: perfect oracle yields zero loss") {
  auto seq = random_sequences(4, 9, 8, 3);
  SequenceBatch batch(seq, 1);
  stubs::OracleInterpolator interp(seq, 0);
  auto gen = at::detail::createCPUGenerator(5);
  auto loss = train_interpolator_step(interp, batch, LcbConfig{}, NormalizationSpec::analytic(),
                                      gen);
  CHECK(loss.item<double>() == 0.0);
}

TEST_CASE("stage 1 rejects horizons without an interior timestep") {
  auto seq = random_sequences(2, 2, 8, 4);  // context 1 + horizon 1
  SequenceBatch batch(seq, 1);
  stubs::OracleInterpolator interp(seq, 0);
  auto gen = at::detail::createCPUGenerator(5);
  CHECK_THROWS_AS(
      train_interpolator_step(interp, batch, LcbConfig{}, NormalizationSpec::analytic(), gen),
      std::invalid_argument);
}

TEST_CASE("stage 1 touches exactly three frames per sample for any horizon") {
  for (int h : {4, 8, 16}) {
    auto seq = random_sequences(3, h + 1, 8, 10 + h);
    SequenceBatch batch(seq, 1);
    stubs::OracleInterpolator interp(seq, 0);
    auto gen = at::detail::createCPUGenerator(6);
    train_interpolator_step(interp, batch, LcbConfig{}, NormalizationSpec::analytic(), gen);

    std::map<std::int64_t, std::set<std::int64_t>> touched;
    for (const auto& a : batch.accesses()) touched[a.sample].insert(a.frame);
    REQUIRE(touched.size() == 3);
    for (const auto& [sample, frames] : touched) CHECK(frames.size() == 3);
  }
}

TEST_CASE("cold sampling update: algebraic cancellation and clamp") {
  // pinned per-step interpolants on a single pixel
  auto frame = [](double v) { return torch::full({1, 1, 1}, v); };
  std::vector<torch::Tensor> table;
  for (int i = 0; i <= 8; ++i) table.push_back(frame(0.1 * i));
  stubs::TableInterpolator interp(table);
  auto gen = at::detail::createCPUGenerator(0);
  auto x0 = frame(0.0).unsqueeze(0);

  SUBCASE("if xhat_in equals I(.., n) exactly, the result is I(.., n+1)") {
    auto out = cold_sampling_update(interp, x0, x0, frame(0.3).unsqueeze(0), 3, 8, gen);
    CHECK(torch::allclose(out, frame(0.4).unsqueeze(0), 1e-7, 1e-7));
  }

  SUBCASE("pre-clamp value -0.1 clamps to zero") {
    // I(n+1) = 0.6, I(n) = 0.9, xhat_in = 0.2 -> 0.6 - 0.9 + 0.2 = -0.1 -> 0
    std::vector<torch::Tensor> adversarial = {frame(0.0), frame(0.9), frame(0.6)};
    stubs::TableInterpolator bad(adversarial);
    auto out = cold_sampling_update(bad, x0, x0, frame(0.2).unsqueeze(0), 1, 8, gen);
    CHECK(out.item<double>() == 0.0);
  }

  SUBCASE("values above one clamp to one") {
    std::vector<torch::Tensor> adversarial = {frame(0.0), frame(0.1), frame(0.9)};
    stubs::TableInterpolator bad(adversarial);
    auto out = cold_sampling_update(bad, x0, x0, frame(0.5).unsqueeze(0), 1, 8, gen);
    CHECK(out.item<double>() == 1.0);
  }

  SUBCASE("step index out of range") {
    CHECK_THROWS(cold_sampling_update(interp, x0, x0, x0, 8, 8, gen));
    CHECK_THROWS(cold_sampling_update(interp, x0, x0, x0, -1, 8, gen));
  }
}

TEST_CASE("cold sampling reconstructs ground truth with oracle components") {
  const int h = 8;
  auto seq = random_sequences(1, h + 1, 16, 21);
  stubs::OracleInterpolator interp(seq, 0);
  auto gen = at::detail::createCPUGenerator(1);
  auto x0 = seq.select(1, 0);
  auto xh = seq.select(1, h);

  auto xhat = x0;
  for (int n = 0; n <= h - 2; ++n) {
    xhat = cold_sampling_update(interp, x0, xh, xhat, n, h, gen);
    CHECK((xhat - seq.select(1, n + 1)).abs().max().item<double>() <= 1e-6);
  }
}

TEST_CASE("rollout with oracle components reproduces the target sequence") {
  const int h = 8;
  auto seq = random_sequences(1, h + 1, 16, 22);
  DyffusionState state;
  state.interpolator = std::make_shared<stubs::OracleInterpolator>(seq, 0);
  state.forecastor = std::make_shared<stubs::OracleForecastor>(seq.select(1, h));
  state.horizon_steps = h;

  auto forecast = rollout(seq[0][0], state, 2, 33);
  CHECK(forecast.members.sizes() == c10::IntArrayRef({2, h, 1, 16, 16}));
  CHECK(forecast.lead_minutes == std::vector<int>{30, 60, 90, 120, 150, 180, 210, 240});
  for (int m = 0; m < 2; ++m)
    for (int k = 1; k <= h; ++k)
      CHECK((forecast.members[m][k - 1] - seq[0][k]).abs().max().item<double>() <= 1e-6);
}

TEST_CASE("rollout members: determinism, spread and range") {
  torch::manual_seed(41);
  const int h = 4;
  auto interp_net = TimeConditionedUNet(tiny_unet(0.25));
  auto fc_net = TimeConditionedUNet(tiny_unet(0.0));
  DyffusionState state;
  state.interpolator = std::make_shared<UNetInterpolator>(interp_net);
  state.forecastor = std::make_shared<UNetForecastor>(fc_net);
  state.horizon_steps = h;

  auto gen = at::detail::createCPUGenerator(2);
  auto x0 = torch::rand({1, 16, 16}, gen);

  auto a = rollout_member(x0, state, 1234);
  auto b = rollout_member(x0, state, 1234);
  CHECK(torch::equal(a, b));  // identical seeds give identical members

  auto forecast = rollout(x0, state, 3, 99);
  CHECK(forecast.members.sizes() == c10::IntArrayRef({3, h, 1, 16, 16}));
  CHECK(forecast.member_seeds.size() == 3);
  CHECK(forecast.members.min().item<float>() >= 0.0f);
  CHECK(forecast.members.max().item<float>() <= 1.0f);
  // dropout > 0 with distinct member seeds: strictly positive spread
  auto spread = torch::std(forecast.members, 0, true).mean().item<double>();
  CHECK(spread > 0.0);

  // dropout = 0 in both nets: spread exactly zero
  torch::manual_seed(42);
  auto det_interp = TimeConditionedUNet(tiny_unet(0.0));
  DyffusionState det_state;
  det_state.interpolator = std::make_shared<UNetInterpolator>(det_interp);
  det_state.forecastor = std::make_shared<UNetForecastor>(fc_net);
  det_state.horizon_steps = h;
  auto det = rollout(x0, det_state, 3, 99);
  CHECK(torch::std(det.members, 0, true).abs().max().item<double>() == 0.0);
}

TEST_CASE("stage 2: epoch 0 loss equals the initial-forecast loss alone") {
  const int h = 8;
  auto seq = random_sequences(2, h + 1, 16, 55);
  SequenceBatch batch(seq, 1);
  stubs::OracleInterpolator interp(seq, 0);
  auto init_value = torch::full({1, 1, 1}, 0.42);
  stubs::ConstForecastor fc(init_value);
  auto spec = NormalizationSpec::analytic();
  auto gen = at::detail::createCPUGenerator(3);

  auto loss = train_forecastor_step(fc, interp, batch, /*epoch=*/0, LcbConfig{},
                                    CompositeLossConfig{}, spec, gen);
  auto expected = lcb_loss(init_value.expand_as(seq.select(1, 0)), seq.select(1, h), LcbConfig{},
                           spec);
  CHECK(loss.item<double>() == doctest::Approx(expected.item<double>()).epsilon(1e-12));
}

TEST_CASE("stage 2: static fields with identity oracles give zero loss") {
  const int h = 8;
  auto frame = torch::rand({1, 1, 16, 16}, at::detail::createCPUGenerator(8));
  auto seq = frame.unsqueeze(1).repeat({1, h + 1, 1, 1, 1});  // static sequence
  SequenceBatch batch(seq, 1);
  stubs::OracleInterpolator interp(seq, 0);
  stubs::OracleForecastor fc(seq.select(1, h));
  auto gen = at::detail::createCPUGenerator(4);

  for (int epoch : {0, 10, 25}) {
    auto loss = train_forecastor_step(fc, interp, batch, epoch, LcbConfig{},
                                      CompositeLossConfig{}, NormalizationSpec::analytic(), gen);
    CHECK(loss.item<double>() <= 1e-12);
  }
}

TEST_CASE("stage 2 contracts: horizon blindness and bounded footprint") {
  for (int h : {4, 8, 16}) {
    auto seq = random_sequences(3, h + 1, 8, 100 + h);
    SequenceBatch batch(seq, 1);
    stubs::OracleInterpolator interp(seq, 0);
    stubs::OracleForecastor fc(seq.select(1, h));
    auto gen = at::detail::createCPUGenerator(5);
    train_forecastor_step(fc, interp, batch, 3, LcbConfig{}, CompositeLossConfig{},
                          NormalizationSpec::analytic(), gen);

    std::map<std::int64_t, std::set<std::int64_t>> touched;
    for (const auto& a : batch.accesses()) {
      touched[a.sample].insert(a.frame);
      if (a.use == FrameUse::kNetworkInput)
        CHECK(a.frame <= batch.x0_index());  // no target frame ever feeds a network
    }
    for (const auto& [sample, frames] : touched) CHECK(frames.size() <= 4);
  }
}

TEST_CASE("stage 2 requires interpolator dropout") {
  auto seq = random_sequences(1, 9, 8, 7);
  SequenceBatch batch(seq, 1);
  stubs::OracleInterpolator no_dropout(seq, 0, /*rate=*/0.0);
  stubs::OracleForecastor fc(seq.select(1, 8));
  auto gen = at::detail::createCPUGenerator(6);
  CHECK_THROWS_AS(train_forecastor_step(fc, no_dropout, batch, 0, LcbConfig{},
                                        CompositeLossConfig{}, NormalizationSpec::analytic(), gen),
                  std::invalid_argument);
}

TEST_CASE("stage 1 smoke training run halves the loss within 50 steps") {
  torch::manual_seed(7);
  auto seqs = synth_advection(smoke_config());
  auto ds = SequenceDataset::from_sequences(seqs);
  auto net = TimeConditionedUNet(tiny_unet(0.1));
  UNetInterpolator interp(net);
  torch::optim::Adam opt(net->parameters(), 3e-3);
  auto gen = at::detail::createCPUGenerator(8);
  auto spec = ds.spec;

  double first = 0.0, last = 0.0;
  for (int step = 0; step < 50; ++step) {
    auto idx = torch::randint(0, ds.size(), {4}, gen, torch::TensorOptions().dtype(torch::kInt64));
    SequenceBatch batch(ds.sequences.index_select(0, idx), ds.context);
    opt.zero_grad();
    auto loss = train_interpolator_step(interp, batch, LcbConfig{}, spec, gen);
    loss.backward();
    opt.step();
    if (step == 0) first = loss.item<double>();
    last = loss.item<double>();
  }
  CHECK(last < 0.5 * first);
}

TEST_CASE("ensemble mean") {
  EnsembleForecast f;
  f.members = torch::stack({torch::full({4, 1, 8, 8}, 0.2), torch::full({4, 1, 8, 8}, 0.4)}, 0);
  auto mean = ensemble_mean(f);
  CHECK(torch::allclose(mean, torch::full({4, 1, 8, 8}, 0.3)));

  EnsembleForecast single;
  single.members = torch::rand({1, 4, 1, 8, 8}, at::detail::createCPUGenerator(3));
  CHECK(torch::equal(ensemble_mean(single), single.members[0]));

  auto gen = at::detail::createCPUGenerator(9);
  EnsembleForecast many;
  many.members = torch::rand({5, 4, 1, 8, 8}, gen);
  EnsembleForecast reversed;
  reversed.members = many.members.flip(0);
  CHECK(torch::allclose(ensemble_mean(many), ensemble_mean(reversed), 1e-6, 1e-7));

  EnsembleForecast empty;
  CHECK_THROWS(ensemble_mean(empty));
}

TEST_CASE("member seeds are deterministic and distinct") {
  CHECK(member_seed(42, 0) == member_seed(42, 0));
  std::set<std::uint64_t> seeds;
  for (int m = 0; m < 16; ++m) seeds.insert(member_seed(42, m));
  CHECK(seeds.size() == 16);
}

}  // TEST_SUITE
