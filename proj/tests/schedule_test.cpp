#include <cmath>
#include <random>

#include "doctest.h"
#include "maskdiff/schedule.hpp"
#include "maskdiff/verify.hpp"

using namespace maskdiff;

namespace {

Tensor<double> scalar(double v) { return Tensor<double>::scalar(v); }

}  // namespace

TEST_SUITE("schedule") {

TEST_CASE("rejects bad lengths and endpoints") {
  CHECK_THROWS_AS(NoiseSchedule::linear(0, 1e-4, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 1e-4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.03, 0.02), std::invalid_argument);
  const auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
  CHECK_THROWS_AS(s.beta(0), std::out_of_range);
  CHECK_THROWS_AS(s.beta(11), std::out_of_range);
}

TEST_CASE("thousand steps with endpoints inclusive") {
  const auto s = NoiseSchedule::linear(1000, 1e-4, 0.02);
  CHECK(s.steps() == 1000);
  CHECK(s.betas().size() == 1000);
  CHECK(s.alpha_bars().size() == 1001);
  CHECK(s.beta(1) == 1e-4);
  CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-15));
  CHECK(s.alpha_bar(1000) < 0.02);
}

TEST_CASE("type invariants hold for several lengths") {
  for (int T : {1, 2, 4, 50, 200, 1000}) {
    const auto s = NoiseSchedule::linear(T, 1e-4, 0.02);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.posterior_variance(1) == 0.0);
    for (int t = 1; t <= T; ++t) {
      CHECK(s.beta(t) > 0.0);
      CHECK(s.beta(t) < 1.0);
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      CHECK(s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t));
      CHECK(s.posterior_variance(t) <= s.beta(t));
    }
  }
}

TEST_CASE("constant beta 0.5 over three steps") {
  const auto s = NoiseSchedule::linear(3, 0.5, 0.5);
  for (int t = 1; t <= 3; ++t) CHECK(s.alpha(t) == 0.5);
  CHECK(s.alpha_bar(1) == 0.5);
  CHECK(s.alpha_bar(2) == 0.25);
  CHECK(s.alpha_bar(3) == 0.125);
}

TEST_CASE("abar_4 of the short default-endpoint schedule") {
  // Exact rational product of the four interpolated betas, evaluated offline.
  const auto s = NoiseSchedule::linear(4, 1e-4, 0.02);
  CHECK(s.alpha_bar(4) == doctest::Approx(0.96029416315756).epsilon(1e-13));
  CHECK(verify::schedule_identities(4).pass);
}

TEST_CASE("q_sample closed form") {
  const auto s = NoiseSchedule::linear(3, 0.5, 0.5);
  const auto y = q_sample(s, scalar(1.0), 2, scalar(1.0));
  CHECK(y.item() == doctest::Approx(std::sqrt(0.25) + std::sqrt(0.75)).epsilon(1e-15));

  // y0 = 0 leaves only the noise term.
  const auto z = q_sample(s, Tensor<double>(Shape{2, 2}), 3, Tensor<double>(Shape{2, 2}, 2.0));
  for (double v : z.values()) CHECK(v == doctest::Approx(std::sqrt(1 - 0.125) * 2.0));

  // Tiny betas: output tends to y0.
  const auto tiny = NoiseSchedule::linear(2, 1e-12, 1e-12);
  CHECK(q_sample(tiny, scalar(0.7), 1, scalar(5.0)).item() == doctest::Approx(0.7).epsilon(1e-5));

  CHECK_THROWS_AS(q_sample(s, scalar(1.0), 4, scalar(0.0)), std::out_of_range);
  CHECK_THROWS_AS(q_sample(s, Tensor<double>(Shape{2}), 1, Tensor<double>(Shape{3})), ShapeError);
}

TEST_CASE("posterior matches the grid oracle on the three-step chain") {
  const auto s = NoiseSchedule::linear(3, 0.5, 0.5);
  const auto p = posterior_params(s, scalar(0.6), scalar(1.0), 2);
  // Frozen from an independent trapezoid integration (numpy, 1.6M points).
  CHECK(p.mean.item() == doctest::Approx(0.754247233265651).epsilon(1e-9));
  CHECK(p.variance == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  const auto grid = verify::grid_posterior(std::sqrt(s.alpha_bar(1)), 1 - s.alpha_bar(1), std::sqrt(s.alpha(2)),
                                           s.beta(2), 0.6);
  CHECK(std::abs(grid.mean - p.mean.item()) < 1e-6);
  CHECK(std::abs(grid.variance - p.variance) < 1e-6);
}

TEST_CASE("posterior at t = 1 is deterministic and linear in its inputs") {
  const auto s = NoiseSchedule::linear(10, 1e-4, 0.02);
  const auto p1 = posterior_params(s, scalar(0.3), scalar(-1.0), 1);
  CHECK(p1.variance == 0.0);
  CHECK(p1.mean.item() == doctest::Approx(-1.0).epsilon(1e-12));

  const auto a = posterior_params(s, scalar(0.4), scalar(0.9), 6);
  const auto b = posterior_params(s, scalar(0.4 * 3), scalar(0.9 * 3), 6);
  CHECK(b.mean.item() == doctest::Approx(3 * a.mean.item()).epsilon(1e-14));
}

TEST_CASE("eps-parameterised mean equals the posterior mean") {
  const auto s = NoiseSchedule::linear(100, 1e-4, 0.02);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int t : {2, 17, 50, 100}) {
    const double y_t = n(rng), eps = n(rng);
    const double y0 = (y_t - std::sqrt(1 - s.alpha_bar(t)) * eps) / std::sqrt(s.alpha_bar(t));
    const auto post = posterior_params(s, scalar(y_t), scalar(y0), t);
    const auto mean = mean_from_eps(s, scalar(y_t), scalar(eps), t);
    CHECK(std::abs(post.mean.item() - mean.item()) < 1e-12);
  }
}

TEST_CASE("forward chain matches the closed-form marginal") {
  const auto s = NoiseSchedule::linear(50, 2e-3, 0.4);
  std::mt19937_64 rng(11);
  for (const auto& m : verify::chain_consistency(s, {1, 10, 50}, 100000, rng)) {
    CHECK(std::abs(m.z_mean) < 4);
    CHECK(std::abs(m.z_var) < 4);
  }
}

}  // TEST_SUITE
