#include "maskdiff/pipeline.hpp"

#include <algorithm>
#include <numeric>

#include "maskdiff/rng.hpp"

namespace maskdiff {

namespace {

// Stream labels for the master seed.
constexpr std::uint64_t kInitStream = 0x1001;
constexpr std::uint64_t kStage1Stream = 0x2001;
constexpr std::uint64_t kStage2Stream = 0x3001;
constexpr std::uint64_t kFinetuneSetStream = 0x4001;

}  // namespace

std::string stage_fingerprint(const RunConfig& config, int stage, int resample) {
  nlohmann::json doc{{"stage", 1},
                     {"denoiser", config.denoiser},
                     {"schedule", config.schedule},
                     {"data", config.data},
                     {"train", config.stage1},
                     {"seed", config.seed}};
  if (stage == 1) return fingerprint_of(doc);
  if (stage != 2) throw std::invalid_argument("stage_fingerprint: stage must be 1 or 2");
  return fingerprint_of(nlohmann::json{
      {"stage", 2}, {"base", fingerprint_of(doc)}, {"train", config.stage2}, {"resample", resample}});
}

BatchSource stage1_source(const RunConfig& config, const std::vector<ShapeClass>& classes) {
  const DataConfig data = config.data;
  const int batch = config.stage1.batch_size;
  return [data, classes, batch](std::mt19937_64& rng) {
    std::vector<Episode> out;
    for (int i = 0; i < batch; ++i) {
      Episode e = draw_base_episode(data, classes, rng);
      if (data.is_novel(e.cls)) {
        throw DataLeak("stage-1 stream produced novel-class instance " + std::to_string(e.instance_id));
      }
      out.push_back(std::move(e));
    }
    return out;
  };
}

EpochSource::EpochSource(std::vector<Episode> episodes, int batch_size)
    : episodes_(std::move(episodes)), batch_size_(batch_size) {
  if (episodes_.empty()) throw std::invalid_argument("EpochSource: no episodes");
  if (batch_size_ < 1) throw std::invalid_argument("EpochSource: batch_size must be >= 1");
  order_.resize(episodes_.size());
  cursor_ = episodes_.size();
}

std::vector<Episode> EpochSource::next(std::mt19937_64& rng) {
  std::vector<Episode> out;
  for (int i = 0; i < batch_size_; ++i) {
    if (cursor_ == order_.size()) {
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::shuffle(order_.begin(), order_.end(), rng);
      cursor_ = 0;
    }
    out.push_back(episodes_[order_[cursor_++]]);
    ++consumed_;
  }
  return out;
}

Checkpoint run_stage1(const RunConfig& config, const Logger& log) {
  config.validate();
  const auto classes = default_classes(config.data.num_classes());
  Checkpoint ckpt;
  ckpt.schedule = config.schedule;
  ckpt.state.config = config.denoiser;
  ckpt.state.params = init_denoiser<float>(config.denoiser, stream_seed(config.seed, kInitStream));
  ckpt.state.optimizer = AdamW<float>(ckpt.state.params.live);
  ckpt.fingerprint = stage_fingerprint(config, 1);
  const NoiseSchedule s = config.schedule.build();
  if (log) log({{"event", "stage1_start"}, {"steps", config.stage1.steps}, {"fingerprint", ckpt.fingerprint}});
  const auto report = train(ckpt.state, s, stage1_source(config, classes), config.stage1,
                            stream_seed(config.seed, kStage1Stream), log);
  ckpt.meta = {{"stage", 1}, {"base_classes", config.data.base_classes()}, {"final_loss", report.losses.empty() ? 0.0 : report.losses.back()}};
  return ckpt;
}

Checkpoint run_stage2(const RunConfig& config, const Checkpoint& base, int resample, const Logger& log) {
  config.validate();
  require_fingerprint(base, stage_fingerprint(config, 1), "stage-2 base checkpoint");
  const auto classes = default_classes(config.data.num_classes());
  auto set_rng = make_stream(config.seed, kFinetuneSetStream + static_cast<std::uint64_t>(resample));
  EpochSource source(build_balanced_finetune_set(config.data, classes, resample, set_rng), config.stage2.batch_size);

  Checkpoint ckpt;
  ckpt.schedule = base.schedule;
  ckpt.state.config = base.state.config;
  ckpt.state.params.live = base.state.params.ema;
  ckpt.state.params.ema = base.state.params.ema;
  ckpt.state.optimizer = AdamW<float>(ckpt.state.params.live);
  ckpt.state.step = base.state.step;
  ckpt.fingerprint = stage_fingerprint(config, 2, resample);
  if (log) {
    log({{"event", "stage2_start"}, {"resample", resample}, {"steps", config.stage2.steps},
         {"episodes_per_epoch", source.epoch_size()}, {"fingerprint", ckpt.fingerprint}});
  }
  const NoiseSchedule s = config.schedule.build();
  const BatchSource batches = [&source](std::mt19937_64& rng) { return source.next(rng); };
  const auto report = train(ckpt.state, s, batches, config.stage2,
                            stream_seed(config.seed, kStage2Stream + static_cast<std::uint64_t>(resample)), log);
  ckpt.meta = {{"stage", 2},
               {"resample", resample},
               {"base_fingerprint", base.fingerprint},
               {"episodes_per_epoch", source.epoch_size()},
               {"episodes_consumed", source.consumed()},
               {"final_loss", report.losses.empty() ? 0.0 : report.losses.back()}};
  return ckpt;
}

Checkpoint cached_checkpoint(const std::filesystem::path& path, const std::string& fingerprint,
                             const std::function<Checkpoint()>& make, const Logger& log) {
  if (std::filesystem::exists(path)) {
    try {
      Checkpoint c = load_checkpoint(path);
      if (c.fingerprint == fingerprint) {
        if (log) log({{"event", "checkpoint_reused"}, {"path", path.string()}});
        return c;
      }
      if (log) log({{"event", "checkpoint_stale"}, {"path", path.string()}, {"found", c.fingerprint}});
    } catch (const CheckpointError& e) {
      if (log) log({{"event", "checkpoint_unreadable"}, {"path", path.string()}, {"error", e.what()}});
    }
  }
  Checkpoint c = make();
  if (c.fingerprint != fingerprint) throw CheckpointError("cached_checkpoint: producer returned a different fingerprint");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  save_checkpoint(c, path);
  if (log) log({{"event", "checkpoint_saved"}, {"path", path.string()}});
  return c;
}

namespace {

SampleResult<float> sample_chunked(const Checkpoint& ckpt, const std::vector<Episode>& episodes,
                                   std::vector<std::mt19937_64>& streams, const SamplerConfig& sampler,
                                   int sample_batch, int snapshot_every) {
  const Denoiser<float> model(ckpt.state.config, ckpt.state.params.ema);
  const NoiseSchedule s = ckpt.schedule.build();
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, sample_batch));
  SampleResult<float> all;
  std::vector<float> cont, masks;
  for (std::size_t first = 0; first < episodes.size(); first += chunk) {
    const std::size_t n = std::min(chunk, episodes.size() - first);
    std::vector<std::mt19937_64> part(streams.begin() + static_cast<std::ptrdiff_t>(first),
                                      streams.begin() + static_cast<std::ptrdiff_t>(first + n));
    auto r = sample_masks_with_streams<float>(model, s, std::span(episodes).subspan(first, n), part, sampler,
                                              snapshot_every);
    std::copy(part.begin(), part.end(), streams.begin() + static_cast<std::ptrdiff_t>(first));
    cont.insert(cont.end(), r.continuous.values().begin(), r.continuous.values().end());
    masks.insert(masks.end(), r.masks.values().begin(), r.masks.values().end());
    if (first == 0) {
      all.snapshots = std::move(r.snapshots);
    } else {
      for (std::size_t k = 0; k < r.snapshots.size() && k < all.snapshots.size(); ++k) {
        auto& dst = all.snapshots[k].second;
        const auto& src = r.snapshots[k].second;
        std::vector<float> joined(dst.values().begin(), dst.values().end());
        joined.insert(joined.end(), src.values().begin(), src.values().end());
        Shape shape = dst.shape();
        shape[0] += src.dim(0);
        dst = Tensor<float>(shape, std::move(joined));
      }
    }
  }
  const Shape& ms = episodes[0].y0.shape();
  const Shape shape{episodes.size(), ms[0], ms[1], ms[2]};
  all.continuous = Tensor<float>(shape, std::move(cont));
  all.masks = Tensor<float>(shape, std::move(masks));
  return all;
}

Tensor<float> item(const Tensor<float>& batch, std::size_t i) {
  const std::size_t per = batch.size() / batch.dim(0);
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  return Tensor<float>(s, std::vector<float>(batch.values().begin() + static_cast<std::ptrdiff_t>(i * per),
                                             batch.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
}

}  // namespace

SampleResult<float> sample_from_checkpoint(const Checkpoint& ckpt, const std::vector<Episode>& episodes,
                                           const SamplerConfig& sampler, int sample_batch, int snapshot_every) {
  if (episodes.empty()) throw std::invalid_argument("sample_from_checkpoint: no episodes");
  std::vector<std::mt19937_64> streams;
  for (const auto& e : episodes) streams.push_back(make_stream(sampler.seed, e.instance_id));
  return sample_chunked(ckpt, episodes, streams, sampler, sample_batch, snapshot_every);
}

std::vector<RunOutcome> score_seeds(const Checkpoint& ckpt, const std::vector<Episode>& episodes,
                                    const Protocol& protocol, const SamplerConfig& sampler, int sample_batch) {
  if (episodes.empty()) throw std::invalid_argument("score_seeds: no episodes");
  std::vector<Episode> items;
  std::vector<std::mt19937_64> streams;
  for (int si = 0; si < protocol.n_seeds; ++si) {
    for (const auto& e : episodes) {
      items.push_back(e);
      streams.push_back(make_stream(protocol.seed(si), e.instance_id));
    }
  }
  const auto result = sample_chunked(ckpt, items, streams, sampler, sample_batch, 0);
  std::vector<RunOutcome> out(static_cast<std::size_t>(protocol.n_seeds));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& o = out[i / episodes.size()];
    o.scores.push_back({items[i].instance_id, items[i].cls, iou(item(result.masks, i), items[i].y0)});
  }
  return out;
}

std::map<int, double> class_iou(const Checkpoint& ckpt, const std::vector<Episode>& episodes,
                                const SamplerConfig& sampler, int sample_batch) {
  const auto result = sample_from_checkpoint(ckpt, episodes, sampler, sample_batch);
  std::map<int, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    auto& a = acc[episodes[i].cls];
    a.first += iou(item(result.masks, i), episodes[i].y0);
    ++a.second;
  }
  std::map<int, double> out;
  for (const auto& [cls, a] : acc) out[cls] = a.first / a.second;
  return out;
}

std::vector<Episode> protocol_episodes(const RunConfig& config, const std::vector<ShapeClass>& classes,
                                       const std::vector<int>& class_ids, int per_class, int resample) {
  DataConfig d = config.data;
  if (per_class < 1 || per_class > d.eval_per_class) throw std::invalid_argument("protocol_episodes: bad per_class");
  d.eval_per_class = per_class;
  return eval_episodes(d, classes, class_ids, resample);
}

}  // namespace maskdiff
