#include <cmath>
#include <map>
#include <random>

#include "doctest.h"
#include "maskdiff/eval.hpp"

using namespace maskdiff;

namespace {

Tensor<float> mask(std::vector<float> v) {
  const std::size_t n = v.size();
  return Tensor<float>(Shape{1, 1, n}, std::move(v));
}

// Outcomes whose IoU is a fixed function of (resample, seed, episode).
std::vector<std::vector<RunOutcome>> synthetic(const Protocol& p, int episodes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<RunOutcome>> out(static_cast<std::size_t>(p.n_shot_resamples));
  for (auto& row : out) {
    for (int s = 0; s < p.n_seeds; ++s) {
      RunOutcome o;
      for (int e = 0; e < episodes; ++e) o.scores.push_back({static_cast<std::uint64_t>(100 + e), e % 2, u(rng)});
      row.push_back(o);
    }
  }
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("iou examples") {
  CHECK(iou(mask({1, 1, 0, 0}), mask({1, 1, 0, 0})) == 1.0);
  CHECK(iou(mask({1, 1, 0, 0}), mask({0, 0, 1, 1})) == 0.0);
  CHECK(iou(mask({1, 1, 0, 0}), mask({0, 1, 1, 0})) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(mask({0, 0, 0}), mask({0, 0, 0})) == 1.0);
  CHECK(iou(mask({0, 0, 0}), mask({0, 1, 0})) == 0.0);
  CHECK_THROWS(iou(mask({0, 0}), mask({0, 0, 0})));
  CHECK_THROWS_AS(iou(mask({0, 0.5f}), mask({0, 1})), std::invalid_argument);
}

TEST_CASE("iou is symmetric") {
  std::mt19937_64 rng(1);
  std::bernoulli_distribution b(0.4);
  for (int i = 0; i < 50; ++i) {
    std::vector<float> x(30), y(30);
    for (auto& v : x) v = b(rng) ? 1.0f : 0.0f;
    for (auto& v : y) v = b(rng) ? 1.0f : 0.0f;
    CHECK(iou(mask(x), mask(y)) == iou(mask(y), mask(x)));
  }
}

TEST_CASE("threshold sweep") {
  const auto t = iou_thresholds();
  REQUIRE(t.size() == 10);
  CHECK(t.front() == doctest::Approx(0.5));
  CHECK(t.back() == doctest::Approx(0.95));
  const auto sweep = threshold_sweep(std::vector<double>{0.4, 0.5, 0.72, 1.0});
  REQUIRE(sweep.size() == 10);
  CHECK(sweep[0].success_rate == 0.75);  // 0.50 is inclusive
  CHECK(sweep[4].success_rate == 0.5);   // 0.70
  CHECK(sweep[5].success_rate == 0.25);  // 0.75
  CHECK(sweep[9].success_rate == 0.25);
  for (std::size_t i = 1; i < sweep.size(); ++i) CHECK(sweep[i].success_rate <= sweep[i - 1].success_rate);

  for (const auto& p : threshold_sweep(std::vector<double>(5, 1.0))) CHECK(p.success_rate == 1.0);
  const std::vector<Tensor<float>> empty{mask({0, 0, 0}), mask({0, 0, 0})};
  const std::vector<Tensor<float>> objects{mask({1, 0, 0}), mask({0, 1, 1})};
  for (const auto& p : threshold_sweep(empty, objects)) CHECK(p.success_rate == 0.0);

  const std::vector<Tensor<float>> pred{mask({1, 1, 0}), mask({1, 0, 0})};
  const std::vector<Tensor<float>> gt{mask({1, 1, 0}), mask({0, 1, 0})};
  const auto from_masks = threshold_sweep(pred, gt);
  CHECK(from_masks[0].success_rate == 0.5);
}

TEST_CASE("population std") {
  CHECK(population_std({}) == 0.0);
  CHECK(population_std({3.0}) == 0.0);
  CHECK(population_std({1.0, 3.0}) == doctest::Approx(1.0));
  CHECK(population_std({2, 4, 4, 4, 5, 5, 7, 9}) == doctest::Approx(2.0));
}

TEST_CASE("constant predictor has zero spread") {
  Protocol p{4, 3, 7};
  const auto report = stability_eval("const", p, [&](int, const Protocol& pr) {
    std::vector<RunOutcome> row(static_cast<std::size_t>(pr.n_seeds));
    for (auto& o : row) o.scores = {{1, 0, 0.625}, {2, 1, 0.625}};
    return row;
  });
  CHECK(report.mean_iou == doctest::Approx(0.625));
  CHECK(report.overall_std == 0.0);
  CHECK(report.seed_axis_std == 0.0);
  CHECK(report.resample_axis_std == 0.0);
  CHECK(report.cells.size() == 12);
  CHECK(report.cells[4].seed == 8);
  CHECK(report.failed_runs == 0);
}

TEST_CASE("seed-only variation shows up on the seed axis only") {
  Protocol p{3, 2, 0};
  const auto report = stability_eval("seed", p, [&](int, const Protocol&) {
    return std::vector<RunOutcome>{{true, "", {{1, 0, 0.2}}}, {true, "", {{1, 0, 0.6}}}};
  });
  CHECK(report.seed_axis_std == doctest::Approx(0.2));
  CHECK(report.resample_axis_std == doctest::Approx(0.0));
}

TEST_CASE("failed runs are reported and excluded") {
  Protocol p{3, 2, 0};
  std::vector<std::string> warnings;
  const auto report = stability_eval(
      "fail", p,
      [&](int r, const Protocol&) -> std::vector<RunOutcome> {
        if (r == 1) throw std::runtime_error("boom");
        return {{true, "", {{1, 0, 0.5}}}, {false, "sampler", {}}};
      },
      nullptr, [&](const std::string& w) { warnings.push_back(w); });
  CHECK(report.failed_runs == 4);
  CHECK(warnings.size() == 4);
  CHECK(report.mean_iou == doctest::Approx(0.5));
  CHECK(report.seed_axis_std == 0.0);  // no resample has every seed
  CHECK(report.cells[2].error == "boom");
}

TEST_CASE("aggregate agrees with a brute-force pass over the raw log") {
  Protocol p{4, 5, 100};
  std::vector<RawRow> raw;
  const auto report = aggregate("brute", p, synthetic(p, 6, 2), &raw);
  const auto rows = parse_raw_csv(raw_csv(raw));
  REQUIRE(rows.size() == 4 * 5 * 6);

  std::map<std::pair<int, int>, std::vector<double>> cells;
  std::map<int, std::vector<double>> by_class;
  std::vector<double> all;
  for (const auto& r : rows) {
    cells[{r.resample, r.seed_index}].push_back(r.iou);
    by_class[r.cls].push_back(r.iou);
    all.push_back(r.iou);
    CHECK(r.seed == p.seed(r.seed_index));
  }
  std::vector<double> cell_means;
  std::vector<double> seed_stds, resample_means;
  for (int ri = 0; ri < 4; ++ri) {
    std::vector<double> row;
    for (int si = 0; si < 5; ++si) row.push_back(mean(cells[{ri, si}]));
    cell_means.insert(cell_means.end(), row.begin(), row.end());
    double m = mean(row), ss = 0;
    for (double v : row) ss += (v - m) * (v - m);
    seed_stds.push_back(std::sqrt(ss / 5));
    resample_means.push_back(m);
  }
  double gm = mean(resample_means), rs = 0;
  for (double v : resample_means) rs += (v - gm) * (v - gm);

  CHECK(report.mean_iou == doctest::Approx(mean(cell_means)).epsilon(1e-12));
  CHECK(report.seed_axis_std == doctest::Approx(mean(seed_stds)).epsilon(1e-12));
  CHECK(report.resample_axis_std == doctest::Approx(std::sqrt(rs / 4)).epsilon(1e-12));
  for (const auto& [cls, v] : by_class) CHECK(report.per_class_mean_iou.at(cls) == doctest::Approx(mean(v)));
  const auto sweep = threshold_sweep(all);
  for (std::size_t i = 0; i < sweep.size(); ++i) CHECK(report.sweep[i].success_rate == sweep[i].success_rate);
  CHECK(report.episodes_scored == all.size());
}

TEST_CASE("aggregate rejects malformed matrices") {
  Protocol p{2, 2, 0};
  CHECK_THROWS_AS(aggregate("x", p, synthetic(Protocol{1, 2, 0}, 1, 3)), std::invalid_argument);
  CHECK_THROWS_AS(aggregate("x", p, synthetic(Protocol{2, 3, 0}, 1, 3)), std::invalid_argument);
  CHECK_THROWS_AS(stability_eval("x", Protocol{0, 1, 0}, {}), std::invalid_argument);
}

TEST_CASE("report JSON round-trips") {
  Protocol p{2, 3, 9};
  const auto report = aggregate("json", p, synthetic(p, 4, 5));
  const nlohmann::json j = report;
  CHECK(j.get<EvalReport>() == report);
  CHECK_FALSE(report_table(report).empty());
}

}  // TEST_SUITE
