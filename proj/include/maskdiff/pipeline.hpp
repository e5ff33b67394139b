#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/eval.hpp"
#include "maskdiff/fewshot_data.hpp"
#include "maskdiff/run_config.hpp"

namespace maskdiff {

class DataLeak : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fingerprint of what a checkpoint was trained on. Stage 1 ignores `resample`.
std::string stage_fingerprint(const RunConfig& config, int stage, int resample = 0);

/// Endless stream of stage-1 batches; aborts with DataLeak if an episode of a
/// novel class ever shows up.
BatchSource stage1_source(const RunConfig& config, const std::vector<ShapeClass>& classes);

/// Cycles through a fixed episode list in a fresh random order every epoch.
class EpochSource {
 public:
  EpochSource(std::vector<Episode> episodes, int batch_size);

  std::vector<Episode> next(std::mt19937_64& rng);
  std::size_t epoch_size() const { return episodes_.size(); }
  std::size_t consumed() const { return consumed_; }

 private:
  std::vector<Episode> episodes_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t consumed_ = 0;
  int batch_size_;
};

using Logger = std::function<void(const nlohmann::json&)>;

/// Fresh network trained on base classes only.
Checkpoint run_stage1(const RunConfig& config, const Logger& log = {});

/// Fine-tunes a stage-1 checkpoint on the balanced K-shot set of `resample`.
/// The live and shadow weights both start from the stage-1 shadow weights;
/// optimizer moments start at zero. meta records episodes_per_epoch and
/// episodes_consumed.
Checkpoint run_stage2(const RunConfig& config, const Checkpoint& base, int resample, const Logger& log = {});

/// Loads `path` if it holds a checkpoint with the expected fingerprint,
/// otherwise runs `make` and saves the result there.
Checkpoint cached_checkpoint(const std::filesystem::path& path, const std::string& fingerprint,
                             const std::function<Checkpoint()>& make, const Logger& log = {});

/// Masks for `episodes` from the shadow weights; item i uses the stream
/// (seed, episodes[i].instance_id). Batched by config.protocol.sample_batch.
SampleResult<float> sample_from_checkpoint(const Checkpoint& ckpt, const std::vector<Episode>& episodes,
                                           const SamplerConfig& sampler, int sample_batch, int snapshot_every = 0);

/// One outcome per protocol seed for a fixed checkpoint; all seeds share
/// sampling batches.
std::vector<RunOutcome> score_seeds(const Checkpoint& ckpt, const std::vector<Episode>& episodes,
                                    const Protocol& protocol, const SamplerConfig& sampler, int sample_batch);

/// Mean IoU per class id over `episodes` for one seed.
std::map<int, double> class_iou(const Checkpoint& ckpt, const std::vector<Episode>& episodes,
                                const SamplerConfig& sampler, int sample_batch);

/// The first `per_class` held-out episodes of each listed class.
std::vector<Episode> protocol_episodes(const RunConfig& config, const std::vector<ShapeClass>& classes,
                                       const std::vector<int>& class_ids, int per_class, int resample);

}  // namespace maskdiff
