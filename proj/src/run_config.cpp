#include "maskdiff/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace maskdiff {

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw std::invalid_argument(std::string(what) + ": unknown key '" + key + "'");
    }
  }
}

template <typename V>
void read_if(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

}  // namespace

void to_json(nlohmann::json& j, const ProtocolConfig& c) {
  j = nlohmann::json{{"n_shot_resamples", c.n_shot_resamples},
                     {"n_seeds", c.n_seeds},
                     {"eval_per_class", c.eval_per_class},
                     {"sample_batch", c.sample_batch}};
}

void from_json(const nlohmann::json& j, ProtocolConfig& c) {
  reject_unknown(j, {"n_shot_resamples", "n_seeds", "eval_per_class", "sample_batch"}, "protocol config");
  c = ProtocolConfig{};
  read_if(j, "n_shot_resamples", c.n_shot_resamples);
  read_if(j, "n_seeds", c.n_seeds);
  read_if(j, "eval_per_class", c.eval_per_class);
  read_if(j, "sample_batch", c.sample_batch);
}

void RunConfig::validate() const {
  denoiser.validate();
  data.validate();
  stage1.validate();
  stage2.validate();
  const NoiseSchedule s = schedule.build();
  sampler.validate(s);
  auto fail = [](const std::string& m) { throw std::invalid_argument("run config: " + m); };
  if (denoiser.image_size != data.image_size) fail("denoiser.image_size must equal data.image_size");
  if (denoiser.image_channels != data.image_channels) fail("denoiser.image_channels must equal data.image_channels");
  if (denoiser.shots != data.shots) fail("denoiser.shots must equal data.shots");
  if (denoiser.num_classes != data.num_classes()) fail("denoiser.num_classes must equal num_base + num_novel");
  if (protocol.n_shot_resamples < 1 || protocol.n_seeds < 1) fail("protocol matrix must be at least 1 x 1");
  if (protocol.eval_per_class < 1 || protocol.eval_per_class > data.eval_per_class) {
    fail("protocol.eval_per_class must lie in [1, data.eval_per_class]");
  }
  if (protocol.sample_batch < 1) fail("protocol.sample_batch must be >= 1");
  if (jobs < 1) fail("jobs must be >= 1");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"denoiser", c.denoiser}, {"schedule", c.schedule}, {"data", c.data},
                     {"stage1", c.stage1},     {"stage2", c.stage2},     {"sampler", c.sampler},
                     {"protocol", c.protocol}, {"seed", c.seed},         {"out_dir", c.out_dir},
                     {"jobs", c.jobs}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown(j, {"denoiser", "schedule", "data", "stage1", "stage2", "sampler", "protocol", "seed", "out_dir", "jobs"},
                 "run config");
  c = RunConfig{};
  read_if(j, "denoiser", c.denoiser);
  read_if(j, "schedule", c.schedule);
  read_if(j, "data", c.data);
  read_if(j, "stage1", c.stage1);
  read_if(j, "stage2", c.stage2);
  read_if(j, "sampler", c.sampler);
  read_if(j, "protocol", c.protocol);
  read_if(j, "seed", c.seed);
  read_if(j, "out_dir", c.out_dir);
  read_if(j, "jobs", c.jobs);
}

RunConfig toy_run_config() {
  RunConfig c;
  c.data = DataConfig{};
  c.denoiser.image_size = c.data.image_size;
  c.denoiser.image_channels = c.data.image_channels;
  c.denoiser.shots = c.data.shots;
  c.denoiser.num_classes = c.data.num_classes();
  c.denoiser.base_channels = 16;
  c.denoiser.channel_multipliers = {1, 2, 2};
  c.denoiser.attention_resolutions = {8};
  c.denoiser.time_embed_dim = 64;
  c.denoiser.norm_groups = 8;
  c.schedule = ScheduleConfig{200, 5e-4, 0.1, SigmaMode::kPosterior};
  c.stage1.steps = 3000;
  c.stage1.batch_size = 8;
  c.stage1.learning_rate = 3e-4;
  c.stage2.steps = 2000;
  c.stage2.batch_size = 8;
  c.stage2.learning_rate = 3e-4;
  c.sampler.omega = 5.0;
  c.protocol = ProtocolConfig{};
  c.seed = 7;
  c.out_dir = "toy_run";
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed config " + path.string() + ": " + e.what());
  }
  RunConfig c;
  try {
    c = j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("malformed config " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

void write_run_config(const RunConfig& c, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << nlohmann::json(c).dump(2) << '\n';
}

}  // namespace maskdiff
