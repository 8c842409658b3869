#include <doctest.h>

#include "bunet/errors.hpp"
#include "bunet/metrics.hpp"
#include "oracles.hpp"

using namespace bunet;
using namespace bunet::test;

namespace {

Tensor mask(std::vector<float> v) {
  const std::size_t n = v.size();
  return Tensor::from_vector({n}, std::move(v));
}

Tensor random_mask(std::size_t n, Rng& rng, double p) {
  std::vector<float> v(n);
  for (auto& x : v) x = rng.bernoulli(p) ? 1.0f : 0.0f;
  return Tensor::from_vector({n}, v);
}

}  // namespace

TEST_CASE("dice and iou on hand fixtures") {
  const Tensor p = mask({1, 1, 0, 0});
  const Tensor g = mask({1, 0, 1, 0});
  CHECK(dice(p, g) == doctest::Approx(0.5));
  CHECK(iou(p, g) == doctest::Approx(1.0 / 3.0));
  CHECK(dice(p, p) == 1.0);
  CHECK(iou(p, p) == 1.0);
  CHECK(dice(mask({1, 1, 0, 0}), mask({0, 0, 1, 1})) == 0.0);
  CHECK(dice(mask({0, 0}), mask({0, 0})) == 1.0);
  CHECK(iou(mask({0, 0}), mask({0, 0})) == 1.0);
  CHECK(dice(mask({0, 0}), mask({1, 0})) == 0.0);

  const OverlapCounts c = overlap(p, g);
  CHECK(c.intersection == 1);
  CHECK(c.union_size() == 3);
  CHECK_THROWS_AS(overlap(mask({0.5f, 1, 0, 0}), g), ContractError);
  CHECK_THROWS_AS(overlap(mask({1, 0}), g), ShapeError);
}

TEST_CASE("dice and iou are related, symmetric and bounded") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const Tensor a = random_mask(50, rng, rng.uniform());
    const Tensor b = random_mask(50, rng, rng.uniform());
    const double d = dice(a, b), j = iou(a, b);
    CHECK(d == doctest::Approx(2.0 * j / (1.0 + j)).epsilon(1e-12));
    CHECK(d == dice(b, a));
    CHECK(j == iou(b, a));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(j <= d);
  }
}

TEST_CASE("adding a true positive never lowers dice") {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const Tensor g = random_mask(40, rng, 0.5);
    Tensor p = random_mask(40, rng, 0.5);
    const double before = dice(p, g);
    auto pv = p.mutable_data();
    for (std::size_t k = 0; k < 40; ++k) {
      if (g.data()[k] == 1.0f && pv[k] == 0.0f) {
        pv[k] = 1.0f;
        break;
      }
    }
    CHECK(dice(p, g) >= before);
  }
}

TEST_CASE("aggregate uses the population standard deviation") {
  const MetricsReport r = aggregate({{"a", 0.9, 0.8}, {"b", 1.0, 1.0}}, "m");
  CHECK(r.mean_dice == doctest::Approx(0.95));
  CHECK(r.sd_dice == doctest::Approx(0.05));
  CHECK(r.mean_iou == doctest::Approx(0.9));
  CHECK(r.sd_iou == doctest::Approx(0.1));
  CHECK_THROWS_AS(aggregate({}, "m"), DataError);

  Rng rng(3);
  std::vector<MetricsRow> rows;
  std::vector<double> ds, js;
  for (int i = 0; i < 37; ++i) {
    rows.push_back({std::to_string(i), rng.uniform(), rng.uniform()});
    ds.push_back(rows.back().dice);
    js.push_back(rows.back().iou);
  }
  const MetricsReport big = aggregate(rows, "x");
  const auto [md, sd] = two_pass_mean_sd(ds);
  const auto [mj, sj] = two_pass_mean_sd(js);
  CHECK(big.mean_dice == doctest::Approx(md).epsilon(1e-12));
  CHECK(big.sd_dice == doctest::Approx(sd).epsilon(1e-10));
  CHECK(big.mean_iou == doctest::Approx(mj).epsilon(1e-12));
  CHECK(big.sd_iou == doctest::Approx(sj).epsilon(1e-10));
}

TEST_CASE("reports round trip through JSON and format as a table") {
  const MetricsReport r = aggregate({{"a", 0.9, 0.8}, {"b", 1.0, 1.0}}, "Bayesian U-Net I");
  const MetricsReport back = report_from_json(report_to_json(r));
  CHECK(back.method == r.method);
  CHECK(back.rows.size() == 2);
  CHECK(back.mean_dice == r.mean_dice);
  CHECK(back.sd_iou == r.sd_iou);
  const std::string table = format_table({r});
  CHECK(table.find("Method") != std::string::npos);
  CHECK(table.find("Bayesian U-Net I") != std::string::npos);
  CHECK(table.find("95.00") != std::string::npos);
  CHECK(table.find("5.00") != std::string::npos);
  CHECK(table.find("90.00") != std::string::npos);
}
