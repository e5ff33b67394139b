#include <random>
#include <set>

#include "doctest.h"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/verify.hpp"

using namespace maskdiff;

namespace {

Tensor<double> noise(Shape s, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

EpsQuery<double> random_query(const DenoiserConfig& c, std::size_t batch, std::mt19937_64& rng) {
  const auto hw = static_cast<std::size_t>(c.image_size), ch = static_cast<std::size_t>(c.image_channels);
  EpsQuery<double> q{noise({batch, 1, hw, hw}, rng), noise({batch, ch, hw, hw}, rng),
                     noise({batch, ch * static_cast<std::size_t>(c.shots), hw, hw}, rng), {}, {}};
  for (std::size_t i = 0; i < batch; ++i) {
    q.classes.push_back(static_cast<int>(i) % c.num_classes);
    q.steps.push_back(1 + static_cast<int>(i) * 7);
  }
  return q;
}

// Jitters every parameter so zero-initialised layers take part.
void jitter(ParamSet<double>& p, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& e : p)
    for (auto& v : e.value.values()) v += n(rng);
}

}  // namespace

TEST_SUITE("denoiser") {

TEST_CASE("config validation") {
  DenoiserConfig c = verify::tiny_denoiser_config();
  CHECK_NOTHROW(c.validate());
  c.image_size = 10;
  c.channel_multipliers = {1, 2, 2};  // three levels need a multiple of 4
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = verify::tiny_denoiser_config();
  c.shots = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = verify::tiny_denoiser_config();
  c.num_classes = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("output shape equals y_t shape across configs") {
  std::mt19937_64 rng(1);
  for (int size : {8, 16}) {
    for (int shots : {1, 3}) {
      for (int channels : {1, 3}) {
        DenoiserConfig c = verify::tiny_denoiser_config();
        c.image_size = size;
        c.shots = shots;
        c.image_channels = channels;
        c.attention_resolutions = {size / 2};
        const auto p = init_denoiser<double>(c, 3);
        const Denoiser<double> net(c, p.live);
        const auto q = random_query(c, 2, rng);
        CHECK(net.predict(q).shape() == q.y_t.shape());
      }
    }
  }
}

TEST_CASE("all-zero weights with a final bias give a constant output") {
  const DenoiserConfig c = verify::tiny_denoiser_config();
  auto p = init_denoiser<double>(c, 5);
  for (auto& e : p.live) e.value.fill(0.0);
  p.live.at("out.b")[0] = 0.375;
  std::mt19937_64 rng(2);
  const auto q = random_query(c, 3, rng);
  const auto out = Denoiser<double>(c, p.live).predict(q);
  for (double v : out.values()) CHECK(v == 0.375);
}

TEST_CASE("conditional and unconditional passes differ") {
  const DenoiserConfig c = verify::tiny_denoiser_config();
  auto p = init_denoiser<double>(c, 6);
  std::mt19937_64 rng(3);
  jitter(p.live, rng);
  auto q = random_query(c, 1, rng);
  const Denoiser<double> net(c, p.live);
  const auto cond = net.predict(q);
  q.classes = {kNullClass};
  CHECK_FALSE(cond == net.predict(q));
}

TEST_CASE("predict_eps rejects bad inputs") {
  const DenoiserConfig c = verify::tiny_denoiser_config();
  const auto p = init_denoiser<double>(c, 7);
  const auto hw = static_cast<std::size_t>(c.image_size);
  const Tensor<double> y(Shape{1, hw, hw}), x(Shape{1, hw, hw}), k(Shape{static_cast<std::size_t>(c.shots), hw, hw});
  CHECK(predict_eps(c, p.live, y, x, k, 1, 3).shape() == y.shape());
  CHECK_THROWS_AS(predict_eps(c, p.live, y, x, k, c.num_classes, 3), std::out_of_range);
  CHECK_THROWS_AS(predict_eps(c, p.live, y, x, k, 1, 0), std::out_of_range);
  CHECK_THROWS_AS(predict_eps(c, p.live, Tensor<double>(Shape{1, hw, hw + 1}), x, k, 1, 3), ShapeError);
  CHECK_THROWS_AS(predict_eps(c, p.live, y, x, Tensor<double>(Shape{1, hw, hw}), 1, 3), ShapeError);
}

TEST_CASE("ema examples") {
  const DenoiserConfig c = verify::tiny_denoiser_config();
  auto p = init_denoiser<double>(c, 8);
  std::mt19937_64 rng(4);
  jitter(p.live, rng);
  const auto shadow = p.ema;
  ema_update(p, 1.0);
  CHECK(p.ema == shadow);
  ema_update(p, 0.0);
  CHECK(p.ema == p.live);

  DenoiserParams<double> s;
  s.live.add("w", Tensor<double>(Shape{1}, 1.0));
  s.ema.add("w", Tensor<double>(Shape{1}, 0.0));
  ema_update(s, 0.9999);
  CHECK(s.ema.at("w")[0] == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK_THROWS_AS(ema_update(s, 1.5), std::invalid_argument);
}

TEST_CASE("time embeddings are distinct") {
  std::set<std::vector<double>> seen;
  for (int t = 1; t <= 1000; ++t) seen.insert(timestep_embedding(t, 16));
  CHECK(seen.size() == 1000);
}

TEST_CASE("shot permutation is measured and reported") {
  const DenoiserConfig c = [] {
    auto d = verify::tiny_denoiser_config();
    d.shots = 3;
    return d;
  }();
  auto p = init_denoiser<double>(c, 9);
  std::mt19937_64 rng(5);
  jitter(p.live, rng);
  const auto q = random_query(c, 2, rng);
  const auto permuted = permute_shots(q.k, 3, {2, 0, 1});
  CHECK(permute_shots(permuted, 3, {1, 2, 0}) == q.k);
  const double sens = permutation_sensitivity<double>(Denoiser<double>(c, p.live), q, 3, 4, rng);
  CHECK(sens >= 0.0);
  MESSAGE("shot-permutation sensitivity (max |delta eps|): " << sens);
}

TEST_CASE("full loss gradient against finite differences") {
  const auto r = verify::denoiser_loss_gradient(21);
  CHECK_MESSAGE(r.pass, r.detail);
}

}  // TEST_SUITE
