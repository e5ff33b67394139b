#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskdiff/episode.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

enum class ShapeFamily { kDisk, kRectangle, kTriangle, kRing, kCross, kStar, kEllipse, kDiamond };

const char* to_string(ShapeFamily f);
ShapeFamily shape_family_from_string(const std::string& s);

/// Procedural object class. Lengths are fractions of the frame side.
struct ShapeClass {
  int id = 0;
  ShapeFamily family = ShapeFamily::kDisk;
  float intensity = 0.8f;        // mean foreground level
  float texture = 0.1f;          // amplitude of the stripe texture on the object
  float radius_min = 0.28f;
  float radius_max = 0.36f;
  float center_jitter = 0.08f;   // max offset of the center from the frame middle
  float max_rotation = 3.14159265f;
  float noise = 0.06f;           // std of additive pixel noise
  int distractors = 4;           // clutter fragments in the background
};

/// The generator's dataset layout. Instances are addressed by id and rendered
/// on demand from (seed, id); nothing is stored.
struct DataConfig {
  int image_size = 32;
  int image_channels = 1;
  int shots = 5;
  int num_base = 6;
  int num_novel = 2;
  int base_pool_per_class = 4096;
  int eval_per_class = 8;
  std::uint64_t seed = 1;

  int num_classes() const { return num_base + num_novel; }
  std::vector<int> base_classes() const;
  std::vector<int> novel_classes() const;
  bool is_novel(int cls) const { return cls >= num_base; }
  void validate() const;
  bool operator==(const DataConfig&) const = default;
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);

/// The eight stock classes: ids 0-5 base, 6-7 novel under the default split.
std::vector<ShapeClass> default_classes(int count);

enum class Split : std::uint64_t { kBaseTrain = 1, kEval = 2, kShots = 3 };

const char* to_string(Split s);

/// Packs (split, resample, class, index) into one instance id.
std::uint64_t instance_id(Split split, int resample, int cls, std::uint32_t index);

struct InstanceKey {
  Split split;
  int resample;
  int cls;
  std::uint32_t index;
};
InstanceKey decode_instance_id(std::uint64_t id);

struct Rendered {
  Tensor<float> x;   // [C,H,W] in [0,1]
  Tensor<float> y0;  // [1,H,W] in {0,1}
};

/// Object composited on a cluttered background plus noise; y0 is the exact
/// membership mask of the object at pixel centres.
Rendered render_instance(const ShapeClass& cls, int image_size, int channels, std::mt19937_64& rng);

/// Rendered instance with its background zeroed through its own mask.
Tensor<float> make_support(const ShapeClass& cls, int image_size, int channels, std::mt19937_64& rng);

/// Background-removed crop of instance `id` (deterministic in config.seed).
Tensor<float> support_crop(const DataConfig& config, const std::vector<ShapeClass>& classes, std::uint64_t id);
Rendered render_by_id(const DataConfig& config, const std::vector<ShapeClass>& classes, std::uint64_t id);

/// One of the seven non-identity symmetries of the square applied to [C,H,W].
Tensor<float> dihedral(const Tensor<float>& image, int op);

/// Stacks K crops of [C,H,W] into [K*C,H,W].
Tensor<float> stack_supports(const std::vector<Tensor<float>>& crops);

/// Episode for query `query_id` with the given support ids.
Episode make_episode(const DataConfig& config, const std::vector<ShapeClass>& classes, std::uint64_t query_id,
                     const std::vector<std::uint64_t>& support_ids);

/// Stage-1 draw: a random base-pool instance of a random base class with K
/// other pool instances of the same class as supports.
Episode draw_base_episode(const DataConfig& config, const std::vector<ShapeClass>& classes, std::mt19937_64& rng);

/// The annotated K shots of class `cls` for shot resample `resample`.
std::vector<std::uint64_t> shot_ids(const DataConfig& config, int resample, int cls);

/// K query instances per class over base and novel classes. Each episode's
/// supports are the other K-1 shots of its class plus a symmetry-transformed
/// copy of its own crop, so no episode conditions on its own unmodified target.
std::vector<Episode> build_balanced_finetune_set(const DataConfig& config, const std::vector<ShapeClass>& classes,
                                                 int resample, std::mt19937_64& rng);

/// Held-out episodes of the listed classes, conditioned on the resample's shots.
std::vector<Episode> eval_episodes(const DataConfig& config, const std::vector<ShapeClass>& classes,
                                   const std::vector<int>& class_ids, int resample);

struct ManifestRecord {
  std::uint64_t instance_id = 0;
  int cls = 0;
  Split split = Split::kEval;
  int resample = 0;
  std::uint32_t index = 0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ManifestRecord& r);

/// Every addressable instance for `resamples` shot resamples.
std::vector<ManifestRecord> build_manifest(const DataConfig& config, int resamples);

/// Line-delimited JSON.
std::string manifest_jsonl(const std::vector<ManifestRecord>& records);

}  // namespace maskdiff
