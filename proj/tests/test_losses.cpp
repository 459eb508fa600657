#include "testing.hpp"

#include <cmath>

#include "nowcast/losses.hpp"
#include "oracles.hpp"

using namespace nowcast;

TEST_SUITE("losses") {

TEST_CASE("class_weight covers every band and both boundary cases") {
  // band examples straight from the weight table
  CHECK(class_weight(0.5) == 1.0);
  CHECK(class_weight(1.0) == 2.0);
  CHECK(class_weight(5.0) == 5.0);
  CHECK(class_weight(8.0) == 10.0);
  CHECK(class_weight(15.0) == 20.0);
  CHECK(class_weight(25.0) == 30.0);
  CHECK(class_weight(40.0) == 50.0);

  CHECK(class_weight(0.0) == 1.0);
  CHECK(class_weight(30.0) == 30.0);
  CHECK(class_weight(30.0 + 1e-9) == 50.0);

  CHECK_THROWS_AS(class_weight(-0.1), std::invalid_argument);
}

TEST_CASE("class_weights tensor lookup matches the scalar path and is monotone") {
  auto gen = at::detail::createCPUGenerator(17);
  auto rates = torch::rand({64}, gen, torch::kFloat64) * 60.0;
  auto w = class_weights(rates);
  for (std::int64_t i = 0; i < rates.size(0); ++i)
    CHECK(w[i].item<double>() == class_weight(rates[i].item<double>()));

  auto sorted = std::get<0>(torch::sort(rates));
  auto ws = class_weights(sorted);
  CHECK((ws.slice(0, 1) >= ws.slice(0, 0, -1)).all().item<bool>());
}

TEST_CASE("cb_loss hand value on a single pixel") {
  // clip_max = 10 puts normalized 0.7 at 11^0.7 - 1 = 4.36 mm/h: weight band 5
  auto spec = NormalizationSpec::analytic(10.0);
  auto pred = torch::full({1, 1, 1, 1}, 0.5, torch::kFloat64);
  auto target = torch::full({1, 1, 1, 1}, 0.7, torch::kFloat64);
  LcbConfig cfg;
  cfg.beta = 1.0;
  auto loss = cb_loss(pred, target, cfg, spec);
  CHECK(loss.item<double>() == doctest::Approx(5.0 * (0.04 + 0.2)).epsilon(1e-9));
}

TEST_CASE("cb_loss basics") {
  auto spec = NormalizationSpec::analytic(100.0);
  auto gen = at::detail::createCPUGenerator(5);
  auto target = torch::rand({2, 1, 8, 8}, gen, torch::kFloat64);
  LcbConfig cfg;

  CHECK(cb_loss(target, target, cfg, spec).item<double>() == 0.0);
  CHECK_THROWS_AS(cb_loss(torch::rand({2, 1, 4, 4}, gen, torch::kFloat64), target, cfg, spec),
                  std::invalid_argument);

  // doubling every weight doubles the loss
  auto pred = torch::rand({2, 1, 8, 8}, gen, torch::kFloat64);
  ClassWeightTable doubled;
  for (auto& w : doubled.weights) w *= 2.0;
  auto base = cb_loss(pred, target, cfg, spec).item<double>();
  auto twice = cb_loss(pred, target, cfg, spec, doubled).item<double>();
  CHECK(twice == doctest::Approx(2.0 * base).epsilon(1e-12));
}

TEST_CASE("cb_loss matches the per-pixel oracle on random grids") {
  auto spec = NormalizationSpec::analytic(100.0);
  auto gen = at::detail::createCPUGenerator(23);
  LcbConfig cfg;
  cfg.beta = 1.0;
  for (int i = 0; i < 20; ++i) {
    auto pred = torch::rand({1, 1, 8, 8}, gen, torch::kFloat64);
    auto target = torch::rand({1, 1, 8, 8}, gen, torch::kFloat64);
    const double expected = oracles::cb_loss_oracle(pred, target, cfg.beta, spec);
    CHECK(cb_loss(pred, target, cfg, spec).item<double>() ==
          doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("perceptual distance properties") {
  RandomConvExtractor extractor(99);
  auto gen = at::detail::createCPUGenerator(31);
  auto a = torch::rand({1, 1, 32, 32}, gen);
  auto b = torch::rand({1, 1, 32, 32}, gen);

  CHECK(perceptual_distance(a, a, extractor).item<double>() == 0.0);
  CHECK(perceptual_distance(a, b, extractor).item<double>() ==
        doctest::Approx(perceptual_distance(b, a, extractor).item<double>()).epsilon(1e-12));
  CHECK(perceptual_distance(a, b, extractor).item<double>() > 0.0);

  // a 16x16 patch perturbation is visible
  auto c = a.clone();
  c.index_put_({0, 0, torch::indexing::Slice(8, 24), torch::indexing::Slice(8, 24)},
               torch::clamp(c.index({0, 0, torch::indexing::Slice(8, 24),
                                     torch::indexing::Slice(8, 24)}) + 0.3, 0.0, 1.0));
  CHECK(perceptual_distance(a, c, extractor).item<double>() > 0.0);

  CHECK_THROWS_AS(perceptual_distance(a, torch::rand({1, 1, 16, 16}, gen), extractor),
                  std::invalid_argument);
}

TEST_CASE("default perceptual extractor is deterministic across constructions") {
  RandomConvExtractor ex1(RandomConvExtractor::kDefaultSeed);
  RandomConvExtractor ex2(RandomConvExtractor::kDefaultSeed);
  auto gen = at::detail::createCPUGenerator(7);
  auto a = torch::rand({1, 1, 32, 32}, gen);
  auto b = torch::rand({1, 1, 32, 32}, gen);
  CHECK(perceptual_distance(a, b, ex1).item<double>() ==
        perceptual_distance(a, b, ex2).item<double>());
  CHECK(perceptual_distance(a, b, ex1).item<double>() ==
        perceptual_distance(a, b).item<double>());
}

TEST_CASE("lcb_loss mixes its components affinely") {
  auto spec = NormalizationSpec::analytic(100.0);
  RandomConvExtractor extractor(1234, torch::kFloat64);
  auto gen = at::detail::createCPUGenerator(3);
  auto pred = torch::rand({1, 1, 16, 16}, gen, torch::kFloat64);
  auto target = torch::rand({1, 1, 16, 16}, gen, torch::kFloat64);

  LcbConfig all_cb;
  all_cb.alpha = 1.0;
  CHECK(lcb_loss(pred, target, all_cb, spec, {}, extractor).item<double>() ==
        doctest::Approx(cb_loss(pred, target, all_cb, spec).item<double>()).epsilon(1e-12));

  LcbConfig all_perceptual;
  all_perceptual.alpha = 0.0;
  CHECK(lcb_loss(pred, target, all_perceptual, spec, {}, extractor).item<double>() ==
        doctest::Approx(perceptual_distance(pred, target, extractor).item<double>())
            .epsilon(1e-12));

  LcbConfig mixed;
  mixed.alpha = 0.6;
  const double cb = cb_loss(pred, target, mixed, spec).item<double>();
  const double lp = perceptual_distance(pred, target, extractor).item<double>();
  CHECK(lcb_loss(pred, target, mixed, spec, {}, extractor).item<double>() ==
        doctest::Approx(0.4 * lp + 0.6 * cb).epsilon(1e-12));

  // alpha = 0.6, cb = 1.0, lpips = 0.5 -> 0.8
  CHECK(0.4 * 0.5 + 0.6 * 1.0 == doctest::Approx(0.8));
}

TEST_CASE("alpha schedule endpoints are exact") {
  CompositeLossConfig cfg;
  CHECK(alpha_schedule(0, cfg) == 1.0);
  CHECK(alpha_schedule(10, cfg) == 0.5);
  CHECK(alpha_schedule(20, cfg) == 0.0);
  CHECK(alpha_schedule(35, cfg) == 0.0);
  CHECK_THROWS_AS(alpha_schedule(-1, cfg), std::invalid_argument);
}

TEST_CASE("composite loss schedule endpoints and hand value") {
  CompositeLossConfig cfg;
  CHECK(composite_loss(3.25, 100.0, 200.0, 0, cfg) == 3.25);
  CHECK(composite_loss(99.0, 1.0, 3.0, 20, cfg) == doctest::Approx(0.5 * 1.0 + 0.5 * 3.0));
  CHECK(composite_loss(99.0, 1.0, 3.0, 25, cfg) == doctest::Approx(2.0));
  // epoch 10: 0.5*2 + 0.5*(0.5*1 + 0.5*3) = 2.0
  CHECK(composite_loss(2.0, 1.0, 3.0, 10, cfg) == doctest::Approx(2.0).epsilon(1e-12));

  auto t = [](double v) { return torch::tensor(v, torch::kFloat64); };
  CHECK(composite_loss(t(2.0), t(1.0), t(3.0), 10, cfg).item<double>() ==
        doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("lcb gradient matches finite differences") {
  auto spec = NormalizationSpec::analytic(100.0);
  RandomConvExtractor extractor(77, torch::kFloat64);
  LcbConfig cfg;  // alpha 0.6, beta 1.0
  auto gen = at::detail::createCPUGenerator(13);

  auto target = torch::rand({1, 1, 4, 4}, gen, torch::kFloat64) * 0.8 + 0.1;
  auto pred = (torch::rand({1, 1, 4, 4}, gen, torch::kFloat64) * 0.8 + 0.1).set_requires_grad(true);

  auto loss = lcb_loss(pred, target, cfg, spec, {}, extractor);
  loss.backward();
  auto grad = pred.grad().clone();

  const double eps = 1e-6;
  auto flat = pred.detach().clone().reshape({-1});
  for (std::int64_t i = 0; i < flat.size(0); ++i) {
    auto plus = flat.clone();
    plus[i] += eps;
    auto minus = flat.clone();
    minus[i] -= eps;
    const double f_plus =
        lcb_loss(plus.reshape({1, 1, 4, 4}), target, cfg, spec, {}, extractor).item<double>();
    const double f_minus =
        lcb_loss(minus.reshape({1, 1, 4, 4}), target, cfg, spec, {}, extractor).item<double>();
    const double fd = (f_plus - f_minus) / (2.0 * eps);
    const double an = grad.reshape({-1})[i].item<double>();
    CHECK(std::abs(fd - an) <= 1e-3 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("config validation") {
  LcbConfig bad_alpha;
  bad_alpha.alpha = 1.5;
  CHECK_THROWS_AS(bad_alpha.validate(), std::invalid_argument);

  ClassWeightTable bad_table;
  bad_table.weights.pop_back();
  CHECK_THROWS_AS(bad_table.validate(), std::invalid_argument);

  ClassWeightTable non_monotone;
  non_monotone.weights[3] = 0.5;
  CHECK_THROWS_AS(non_monotone.validate(), std::invalid_argument);
}

}  // TEST_SUITE
