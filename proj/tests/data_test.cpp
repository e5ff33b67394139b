#include <cmath>
#include <numbers>
#include <set>

#include "doctest.h"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/fewshot_data.hpp"
#include "maskdiff/rng.hpp"

using namespace maskdiff;

namespace {

DataConfig small_config() {
  DataConfig c;
  c.image_size = 16;
  c.shots = 1;
  c.num_base = 3;
  c.num_novel = 2;
  c.base_pool_per_class = 32;
  c.eval_per_class = 4;
  return c;
}

double mean(const Tensor<float>& t) {
  double s = 0;
  for (float v : t.values()) s += v;
  return s / static_cast<double>(t.size());
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("disk area matches pi r^2") {
  ShapeClass disk;
  disk.family = ShapeFamily::kDisk;
  disk.radius_min = disk.radius_max = 0.3f;
  disk.center_jitter = 0.0f;
  disk.noise = 0.0f;
  std::mt19937_64 rng(1);
  const auto r = render_instance(disk, 128, 1, rng);
  const double expected = std::numbers::pi * 0.3 * 0.3;
  CHECK(std::abs(mean(r.y0) - expected) / expected < 0.02);
}

TEST_CASE("stock classes have moderate occupancy and binary masks") {
  const auto classes = default_classes(8);
  for (const auto& cls : classes) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(cls.id) + 10);
    double occ = 0;
    std::size_t bad_mask = 0, bad_pixel = 0;
    for (int i = 0; i < 1000; ++i) {
      const auto r = render_instance(cls, 32, 1, rng);
      for (float v : r.y0.values()) bad_mask += v != 0.0f && v != 1.0f;
      for (float v : r.x.values()) bad_pixel += v < 0.0f || v > 1.0f;
      occ += mean(r.y0) / 1000;
    }
    INFO("class " << cls.id << " (" << to_string(cls.family) << ") occupancy " << occ);
    CHECK(bad_mask == 0);
    CHECK(bad_pixel == 0);
    CHECK(occ >= 0.1);
    CHECK(occ <= 0.6);
  }
}

TEST_CASE("supports are zero outside the object") {
  const auto config = small_config();
  const auto classes = default_classes(config.num_classes());
  const auto id = instance_id(Split::kShots, 0, 4, 0);
  const auto crop = support_crop(config, classes, id);
  const auto full = render_by_id(config, classes, id);
  for (std::size_t i = 0; i < crop.size(); ++i) {
    if (full.y0[i] == 0.0f) CHECK(crop[i] == 0.0f);
    else CHECK(crop[i] == full.x[i]);
  }
}

TEST_CASE("rendering by id is deterministic") {
  const auto config = small_config();
  const auto classes = default_classes(config.num_classes());
  const auto id = instance_id(Split::kEval, 0, 2, 3);
  CHECK(render_by_id(config, classes, id).x == render_by_id(config, classes, id).x);
  CHECK_FALSE(render_by_id(config, classes, id).x == render_by_id(config, classes, id + 1).x);
}

TEST_CASE("permuting supports only reorders the channels of k") {
  auto config = small_config();
  config.shots = 3;
  const auto classes = default_classes(config.num_classes());
  std::mt19937_64 rng(9);
  const auto e = draw_base_episode(config, classes, rng);
  const auto p = permute_shots(e.k.reshaped(Shape{1, 3, 16, 16}), 3, {2, 0, 1}).reshaped(e.k.shape());
  const std::size_t plane = 16 * 16;
  const std::vector<int> order{2, 0, 1};
  for (std::size_t j = 0; j < 3; ++j) {
    const auto src = static_cast<std::size_t>(order[j]);
    for (std::size_t i = 0; i < plane; ++i) REQUIRE(p[j * plane + i] == e.k[src * plane + i]);
  }
  // x, y0 and the class travel with the query, not with k.
  const auto again = make_episode(config, classes, e.instance_id, {e.support_ids[2], e.support_ids[0], e.support_ids[1]});
  CHECK(again.x == e.x);
  CHECK(again.y0 == e.y0);
  CHECK(again.cls == e.cls);
  CHECK(again.k == p);
}

TEST_CASE("instance ids round-trip") {
  const auto id = instance_id(Split::kShots, 7, 5, 123456);
  const auto k = decode_instance_id(id);
  CHECK(k.split == Split::kShots);
  CHECK(k.resample == 7);
  CHECK(k.cls == 5);
  CHECK(k.index == 123456u);
}

TEST_CASE("dihedral ops are distinct symmetries") {
  Tensor<float> img(Shape{1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) img[i] = static_cast<float>(i);
  auto as_vec = [](const Tensor<float>& t) { return std::vector<float>(t.values().begin(), t.values().end()); };
  std::set<std::vector<float>> seen{as_vec(img)};
  for (int op = 1; op <= 7; ++op) {
    const auto d = dihedral(img, op);
    CHECK(d.shape() == img.shape());
    CHECK(d[4] == 4.0f);  // the centre stays put
    seen.insert(as_vec(d));
  }
  CHECK(seen.size() == 8);
  CHECK_THROWS_AS(dihedral(img, 8), std::out_of_range);
}

TEST_CASE("balanced fine-tune set with one shot and five classes") {
  const auto config = small_config();
  const auto classes = default_classes(config.num_classes());
  std::mt19937_64 rng(2);
  const auto set = build_balanced_finetune_set(config, classes, 0, rng);
  REQUIRE(set.size() == 5);
  std::set<int> seen;
  for (const auto& e : set) {
    seen.insert(e.cls);
    CHECK(e.k.shape() == Shape{1, 16, 16});
    CHECK(decode_instance_id(e.instance_id).split == Split::kShots);
    // The only support is a transformed copy of the query's own crop, never the crop itself.
    CHECK_FALSE(e.k == support_crop(config, classes, e.instance_id));
  }
  CHECK(seen == std::set<int>{0, 1, 2, 3, 4});
}

TEST_CASE("balanced set has K per class") {
  auto config = small_config();
  config.shots = 3;
  const auto classes = default_classes(config.num_classes());
  std::mt19937_64 rng(3);
  const auto set = build_balanced_finetune_set(config, classes, 1, rng);
  REQUIRE(set.size() == 15);
  std::map<int, int> per_class;
  for (const auto& e : set) {
    ++per_class[e.cls];
    CHECK(e.support_ids.size() == 3);
    CHECK(std::count(e.support_ids.begin(), e.support_ids.end(), e.instance_id) == 1);
  }
  for (const auto& [cls, n] : per_class) CHECK(n == 3);
}

TEST_CASE("splits are disjoint") {
  const auto config = small_config();
  const auto manifest = build_manifest(config, 3);
  std::set<std::uint64_t> ids;
  for (const auto& r : manifest) ids.insert(r.instance_id);
  CHECK(ids.size() == manifest.size());
  const std::size_t expected = 3 * 32 + 5 * 4 + 3 * 5 * 1;
  CHECK(manifest.size() == expected);
  for (const auto& r : manifest) {
    if (r.split == Split::kBaseTrain) CHECK_FALSE(config.is_novel(r.cls));
  }
}

TEST_CASE("manifest is deterministic and differs with the seed") {
  auto config = small_config();
  const auto a = manifest_jsonl(build_manifest(config, 2));
  CHECK(a == manifest_jsonl(build_manifest(config, 2)));
  config.seed = 2;
  CHECK(a != manifest_jsonl(build_manifest(config, 2)));
}

TEST_CASE("stage-1 draws stay in the base pool") {
  const auto config = small_config();
  const auto classes = default_classes(config.num_classes());
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    const auto e = draw_base_episode(config, classes, rng);
    CHECK_FALSE(config.is_novel(e.cls));
    CHECK(decode_instance_id(e.instance_id).split == Split::kBaseTrain);
    for (auto s : e.support_ids) CHECK(s != e.instance_id);
  }
}

TEST_CASE("eval episodes use the resample's shots") {
  const auto config = small_config();
  const auto classes = default_classes(config.num_classes());
  const auto eps = eval_episodes(config, classes, {3, 4}, 2);
  CHECK(eps.size() == 8);
  for (const auto& e : eps) CHECK(e.support_ids == shot_ids(config, 2, e.cls));
}

TEST_CASE("config validation and JSON") {
  DataConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.num_base = 7;
  c.num_novel = 2;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.base_pool_per_class = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  nlohmann::json j = small_config();
  CHECK(j.get<DataConfig>() == small_config());
  j["typo"] = 1;
  CHECK_THROWS_AS(j.get<DataConfig>(), std::invalid_argument);
}

}  // TEST_SUITE
