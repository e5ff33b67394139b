#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "maskdiff/checkpoint.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/eval.hpp"
#include "maskdiff/fewshot_data.hpp"

namespace maskdiff {

struct ProtocolConfig {
  int n_shot_resamples = 10;
  int n_seeds = 10;
  /// Held-out episodes per class used by the run matrix (at most data.eval_per_class).
  int eval_per_class = 2;
  /// Sampling batch for inference.
  int sample_batch = 64;

  bool operator==(const ProtocolConfig&) const = default;
};

void to_json(nlohmann::json& j, const ProtocolConfig& c);
void from_json(const nlohmann::json& j, ProtocolConfig& c);

/// Fully resolved description of a run. Unknown keys are rejected; absent keys
/// take defaults; every command writes the resolved document next to its output.
struct RunConfig {
  DenoiserConfig denoiser;
  ScheduleConfig schedule;
  DataConfig data;
  TrainConfig stage1;
  TrainConfig stage2;
  SamplerConfig sampler;
  ProtocolConfig protocol;
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  int jobs = 1;

  /// Checks each part and their agreement (sizes, channels, shots, classes).
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// The desk-scale experiment used for the toy two-stage run.
RunConfig toy_run_config();

RunConfig load_run_config(const std::filesystem::path& path);
void write_run_config(const RunConfig& c, const std::filesystem::path& path);

}  // namespace maskdiff
