#include "maskdiff/fewshot_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "maskdiff/rng.hpp"

namespace maskdiff {

namespace {

constexpr std::array<const char*, 8> kFamilyNames{"disk", "rectangle", "triangle", "ring",
                                                  "cross", "star", "ellipse", "diamond"};

struct Point {
  double x, y;
};

bool inside_polygon(const std::vector<Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

std::vector<Point> regular_star(int points, double outer, double inner) {
  std::vector<Point> poly;
  for (int i = 0; i < 2 * points; ++i) {
    const double r = i % 2 == 0 ? outer : inner;
    const double a = std::numbers::pi / 2 + i * std::numbers::pi / points;
    poly.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return poly;
}

const std::vector<Point>& triangle_poly() {
  static const std::vector<Point> p = [] {
    std::vector<Point> v;
    for (int i = 0; i < 3; ++i) {
      const double a = std::numbers::pi / 2 + i * 2 * std::numbers::pi / 3;
      v.push_back({1.15 * std::cos(a), 1.15 * std::sin(a)});
    }
    return v;
  }();
  return p;
}

const std::vector<Point>& star_poly() {
  static const std::vector<Point> p = regular_star(5, 1.0, 0.45);
  return p;
}

// Membership in the unit-scaled local frame of the shape.
bool member(ShapeFamily f, double u, double v) {
  switch (f) {
    case ShapeFamily::kDisk:
      return u * u + v * v <= 1.0;
    case ShapeFamily::kRectangle:
      return std::abs(u) <= 1.0 && std::abs(v) <= 0.6;
    case ShapeFamily::kTriangle:
      return inside_polygon(triangle_poly(), u, v);
    case ShapeFamily::kRing: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case ShapeFamily::kCross:
      return (std::abs(u) <= 0.33 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.33 && std::abs(u) <= 1.0);
    case ShapeFamily::kStar:
      return inside_polygon(star_poly(), u, v);
    case ShapeFamily::kEllipse:
      return u * u + (v / 0.55) * (v / 0.55) <= 1.0;
    case ShapeFamily::kDiamond:
      return std::abs(u) + std::abs(v) <= 1.0;
  }
  return false;
}

float channel_tint(int c) { return 1.0f - 0.15f * static_cast<float>(c); }

void check_id(const std::vector<ShapeClass>& classes, int cls) {
  if (cls < 0 || cls >= static_cast<int>(classes.size())) {
    throw std::out_of_range("class id " + std::to_string(cls) + " outside the class table");
  }
}

}  // namespace

const char* to_string(ShapeFamily f) { return kFamilyNames[static_cast<std::size_t>(f)]; }

ShapeFamily shape_family_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kFamilyNames.size(); ++i) {
    if (s == kFamilyNames[i]) return static_cast<ShapeFamily>(i);
  }
  throw std::invalid_argument("unknown shape family '" + s + "'");
}

std::vector<int> DataConfig::base_classes() const {
  std::vector<int> ids(static_cast<std::size_t>(num_base));
  for (int i = 0; i < num_base; ++i) ids[static_cast<std::size_t>(i)] = i;
  return ids;
}

std::vector<int> DataConfig::novel_classes() const {
  std::vector<int> ids;
  for (int i = num_base; i < num_classes(); ++i) ids.push_back(i);
  return ids;
}

void DataConfig::validate() const {
  if (image_size < 4) throw std::invalid_argument("data config: image_size must be >= 4");
  if (image_channels < 1) throw std::invalid_argument("data config: image_channels must be >= 1");
  if (shots < 1) throw std::invalid_argument("data config: shots must be >= 1");
  if (num_base < 1 || num_novel < 0) throw std::invalid_argument("data config: need >= 1 base class");
  if (num_classes() > 8) throw std::invalid_argument("data config: at most 8 classes are defined");
  if (base_pool_per_class <= shots) throw std::invalid_argument("data config: base pool must exceed the shot count");
  if (eval_per_class < 1) throw std::invalid_argument("data config: eval_per_class must be >= 1");
}

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"image_channels", c.image_channels},
                     {"shots", c.shots},
                     {"num_base", c.num_base},
                     {"num_novel", c.num_novel},
                     {"base_pool_per_class", c.base_pool_per_class},
                     {"eval_per_class", c.eval_per_class},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  static const std::vector<std::string> known{"image_size", "num_base", "num_novel", "image_channels",
                                              "shots", "base_pool_per_class", "eval_per_class", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("data config: unknown key '" + key + "'");
    }
  }
  DataConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.image_channels = j.value("image_channels", d.image_channels);
  c.shots = j.value("shots", d.shots);
  c.num_base = j.value("num_base", d.num_base);
  c.num_novel = j.value("num_novel", d.num_novel);
  c.base_pool_per_class = j.value("base_pool_per_class", d.base_pool_per_class);
  c.eval_per_class = j.value("eval_per_class", d.eval_per_class);
  c.seed = j.value("seed", d.seed);
}

std::vector<ShapeClass> default_classes(int count) {
  static const std::array<ShapeFamily, 8> families{ShapeFamily::kDisk,  ShapeFamily::kRectangle, ShapeFamily::kTriangle,
                                                   ShapeFamily::kRing,  ShapeFamily::kCross,     ShapeFamily::kStar,
                                                   ShapeFamily::kEllipse, ShapeFamily::kDiamond};
  static const std::array<float, 8> intensity{0.80f, 0.70f, 0.85f, 0.75f, 0.90f, 0.80f, 0.72f, 0.86f};
  if (count < 1 || count > 8) throw std::invalid_argument("default_classes: count must lie in [1, 8]");
  std::vector<ShapeClass> out;
  for (int i = 0; i < count; ++i) {
    ShapeClass c;
    c.id = i;
    c.family = families[static_cast<std::size_t>(i)];
    c.intensity = intensity[static_cast<std::size_t>(i)];
    if (c.family == ShapeFamily::kStar) {
      c.radius_min = 0.36f;
      c.radius_max = 0.44f;
    }
    out.push_back(c);
  }
  return out;
}

const char* to_string(Split s) {
  switch (s) {
    case Split::kBaseTrain: return "base_train";
    case Split::kEval: return "eval";
    case Split::kShots: return "shots";
  }
  return "?";
}

std::uint64_t instance_id(Split split, int resample, int cls, std::uint32_t index) {
  if (resample < 0 || resample >= (1 << 12) || cls < 0 || cls >= (1 << 16)) {
    throw std::out_of_range("instance_id: resample or class out of range");
  }
  return (static_cast<std::uint64_t>(split) << 60) | (static_cast<std::uint64_t>(resample) << 48) |
         (static_cast<std::uint64_t>(cls) << 32) | index;
}

InstanceKey decode_instance_id(std::uint64_t id) {
  return {static_cast<Split>(id >> 60), static_cast<int>((id >> 48) & 0xFFF), static_cast<int>((id >> 32) & 0xFFFF),
          static_cast<std::uint32_t>(id & 0xFFFFFFFFu)};
}

Rendered render_instance(const ShapeClass& cls, int image_size, int channels, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const std::size_t n = static_cast<std::size_t>(image_size);
  const double side = static_cast<double>(image_size);

  const double cx = 0.5 + uniform(-cls.center_jitter, cls.center_jitter);
  const double cy = 0.5 + uniform(-cls.center_jitter, cls.center_jitter);
  const double radius = uniform(cls.radius_min, cls.radius_max);
  const double angle = uniform(-cls.max_rotation, cls.max_rotation);
  const double stripe_freq = uniform(2.0, 5.0) * 2 * std::numbers::pi;
  const double stripe_dir = uniform(0.0, std::numbers::pi);
  const double stripe_phase = uniform(0.0, 2 * std::numbers::pi);

  const double bg_level = uniform(0.1, 0.3);
  const double grad_dir = uniform(0.0, 2 * std::numbers::pi);
  const double grad_amp = uniform(0.0, 0.15);

  struct Fragment {
    double x, y, r, level;
    bool bar;
    double angle;
  };
  std::vector<Fragment> fragments;
  for (int i = 0; i < cls.distractors; ++i) {
    fragments.push_back(
        {unit(rng), unit(rng), uniform(0.04, 0.09), uniform(0.5, 0.95), unit(rng) < 0.5, uniform(0.0, std::numbers::pi)});
  }

  Rendered out{Tensor<float>(Shape{static_cast<std::size_t>(channels), n, n}), Tensor<float>(Shape{1, n, n})};
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t py = 0; py < n; ++py) {
    for (std::size_t px = 0; px < n; ++px) {
      const double x = (static_cast<double>(px) + 0.5) / side;
      const double y = (static_cast<double>(py) + 0.5) / side;
      double level = bg_level + grad_amp * ((x - 0.5) * std::cos(grad_dir) + (y - 0.5) * std::sin(grad_dir));
      for (const auto& f : fragments) {
        const double dx = x - f.x, dy = y - f.y;
        bool hit;
        if (f.bar) {
          const double along = dx * std::cos(f.angle) + dy * std::sin(f.angle);
          const double across = -dx * std::sin(f.angle) + dy * std::cos(f.angle);
          hit = std::abs(along) <= 1.6 * f.r && std::abs(across) <= 0.35 * f.r;
        } else {
          hit = dx * dx + dy * dy <= f.r * f.r;
        }
        if (hit) level = f.level;
      }
      const double u = ((x - cx) * ca + (y - cy) * sa) / radius;
      const double v = (-(x - cx) * sa + (y - cy) * ca) / radius;
      const bool fg = member(cls.family, u, v);
      if (fg) {
        const double s = (x * std::cos(stripe_dir) + y * std::sin(stripe_dir)) * stripe_freq + stripe_phase;
        level = cls.intensity + cls.texture * std::sin(s);
      }
      out.y0[py * n + px] = fg ? 1.0f : 0.0f;
      for (int c = 0; c < channels; ++c) {
        out.x[(static_cast<std::size_t>(c) * n + py) * n + px] = static_cast<float>(level) * channel_tint(c);
      }
    }
  }
  if (cls.noise > 0) {
    std::normal_distribution<float> noise(0.0f, cls.noise);
    for (auto& v : out.x.values()) v += noise(rng);
  }
  for (auto& v : out.x.values()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

Tensor<float> make_support(const ShapeClass& cls, int image_size, int channels, std::mt19937_64& rng) {
  Rendered r = render_instance(cls, image_size, channels, rng);
  const std::size_t plane = r.y0.size();
  for (std::size_t c = 0; c < static_cast<std::size_t>(channels); ++c) {
    for (std::size_t i = 0; i < plane; ++i) r.x[c * plane + i] *= r.y0[i];
  }
  return r.x;
}

Rendered render_by_id(const DataConfig& config, const std::vector<ShapeClass>& classes, std::uint64_t id) {
  const int cls = decode_instance_id(id).cls;
  check_id(classes, cls);
  auto rng = make_stream(config.seed, id);
  return render_instance(classes[static_cast<std::size_t>(cls)], config.image_size, config.image_channels, rng);
}

Tensor<float> support_crop(const DataConfig& config, const std::vector<ShapeClass>& classes, std::uint64_t id) {
  const int cls = decode_instance_id(id).cls;
  check_id(classes, cls);
  auto rng = make_stream(config.seed, id);
  return make_support(classes[static_cast<std::size_t>(cls)], config.image_size, config.image_channels, rng);
}

Tensor<float> dihedral(const Tensor<float>& image, int op) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) throw ShapeError("dihedral: need a square [C,H,W] image");
  if (op < 0 || op > 7) throw std::out_of_range("dihedral: op must lie in [0, 7]");
  const std::size_t c = image.dim(0), n = image.dim(1);
  Tensor<float> out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        std::size_t si = i, sj = j;
        switch (op) {
          case 1: si = n - 1 - j; sj = i; break;
          case 2: si = n - 1 - i; sj = n - 1 - j; break;
          case 3: si = j; sj = n - 1 - i; break;
          case 4: sj = n - 1 - j; break;
          case 5: si = n - 1 - i; break;
          case 6: si = j; sj = i; break;
          case 7: si = n - 1 - j; sj = n - 1 - i; break;
          default: break;
        }
        out[(ch * n + i) * n + j] = image[(ch * n + si) * n + sj];
      }
    }
  }
  return out;
}

Tensor<float> stack_supports(const std::vector<Tensor<float>>& crops) {
  if (crops.empty()) throw std::invalid_argument("stack_supports: no crops");
  const Shape& s = crops[0].shape();
  std::vector<float> data;
  data.reserve(crops.size() * crops[0].size());
  for (const auto& c : crops) {
    require_same_shape(c.shape(), s, "stack_supports");
    data.insert(data.end(), c.values().begin(), c.values().end());
  }
  return Tensor<float>(Shape{crops.size() * s[0], s[1], s[2]}, std::move(data));
}

Episode make_episode(const DataConfig& config, const std::vector<ShapeClass>& classes, std::uint64_t query_id,
                     const std::vector<std::uint64_t>& support_ids) {
  if (static_cast<int>(support_ids.size()) != config.shots) {
    throw std::invalid_argument("make_episode: expected " + std::to_string(config.shots) + " supports");
  }
  const int cls = decode_instance_id(query_id).cls;
  std::vector<Tensor<float>> crops;
  for (auto id : support_ids) {
    if (decode_instance_id(id).cls != cls) throw std::invalid_argument("make_episode: support from another class");
    crops.push_back(support_crop(config, classes, id));
  }
  Rendered q = render_by_id(config, classes, query_id);
  return Episode{std::move(q.x), stack_supports(crops), std::move(q.y0), cls, query_id, support_ids};
}

Episode draw_base_episode(const DataConfig& config, const std::vector<ShapeClass>& classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick_class(0, config.num_base - 1);
  std::uniform_int_distribution<std::uint32_t> pick_index(0, static_cast<std::uint32_t>(config.base_pool_per_class - 1));
  const int cls = pick_class(rng);
  const std::uint32_t query = pick_index(rng);
  std::vector<std::uint32_t> taken{query};
  std::vector<std::uint64_t> supports;
  while (static_cast<int>(supports.size()) < config.shots) {
    const std::uint32_t idx = pick_index(rng);
    if (std::find(taken.begin(), taken.end(), idx) != taken.end()) continue;
    taken.push_back(idx);
    supports.push_back(instance_id(Split::kBaseTrain, 0, cls, idx));
  }
  return make_episode(config, classes, instance_id(Split::kBaseTrain, 0, cls, query), supports);
}

std::vector<std::uint64_t> shot_ids(const DataConfig& config, int resample, int cls) {
  std::vector<std::uint64_t> ids;
  for (int j = 0; j < config.shots; ++j) ids.push_back(instance_id(Split::kShots, resample, cls, static_cast<std::uint32_t>(j)));
  return ids;
}

std::vector<Episode> build_balanced_finetune_set(const DataConfig& config, const std::vector<ShapeClass>& classes,
                                                 int resample, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick_op(1, 7);
  std::vector<Episode> out;
  for (int cls = 0; cls < config.num_classes(); ++cls) {
    const auto shots = shot_ids(config, resample, cls);
    std::vector<Tensor<float>> crops;
    for (auto id : shots) crops.push_back(support_crop(config, classes, id));
    for (std::size_t j = 0; j < shots.size(); ++j) {
      std::vector<Tensor<float>> chosen;
      std::vector<std::uint64_t> ids;
      for (std::size_t o = 0; o < shots.size(); ++o) {
        if (o == j) continue;
        chosen.push_back(crops[o]);
        ids.push_back(shots[o]);
      }
      chosen.push_back(dihedral(crops[j], pick_op(rng)));
      ids.push_back(shots[j]);
      Rendered q = render_by_id(config, classes, shots[j]);
      out.push_back(Episode{std::move(q.x), stack_supports(chosen), std::move(q.y0), cls, shots[j], std::move(ids)});
    }
  }
  return out;
}

std::vector<Episode> eval_episodes(const DataConfig& config, const std::vector<ShapeClass>& classes,
                                   const std::vector<int>& class_ids, int resample) {
  std::vector<Episode> out;
  for (int cls : class_ids) {
    const auto supports = shot_ids(config, resample, cls);
    for (int i = 0; i < config.eval_per_class; ++i) {
      out.push_back(make_episode(config, classes, instance_id(Split::kEval, 0, cls, static_cast<std::uint32_t>(i)),
                                 supports));
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const ManifestRecord& r) {
  j = nlohmann::json{{"instance_id", r.instance_id}, {"class", r.cls},     {"split", to_string(r.split)},
                     {"resample", r.resample},       {"index", r.index},   {"seed", r.seed}};
}

std::vector<ManifestRecord> build_manifest(const DataConfig& config, int resamples) {
  config.validate();
  std::vector<ManifestRecord> out;
  auto push = [&](Split split, int resample, int cls, std::uint32_t index) {
    const std::uint64_t id = instance_id(split, resample, cls, index);
    out.push_back({id, cls, split, resample, index, stream_seed(config.seed, id)});
  };
  for (int cls : config.base_classes()) {
    for (int i = 0; i < config.base_pool_per_class; ++i) push(Split::kBaseTrain, 0, cls, static_cast<std::uint32_t>(i));
  }
  for (int cls = 0; cls < config.num_classes(); ++cls) {
    for (int i = 0; i < config.eval_per_class; ++i) push(Split::kEval, 0, cls, static_cast<std::uint32_t>(i));
  }
  for (int r = 0; r < resamples; ++r) {
    for (int cls = 0; cls < config.num_classes(); ++cls) {
      for (int i = 0; i < config.shots; ++i) push(Split::kShots, r, cls, static_cast<std::uint32_t>(i));
    }
  }
  return out;
}

std::string manifest_jsonl(const std::vector<ManifestRecord>& records) {
  std::ostringstream os;
  for (const auto& r : records) os << nlohmann::json(r).dump() << '\n';
  return os.str();
}

}  // namespace maskdiff
