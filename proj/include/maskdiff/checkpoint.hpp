#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Schedule parameters as stored in configs; `build` makes the schedule.
struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  SigmaMode sigma_mode = SigmaMode::kPosterior;

  NoiseSchedule build() const { return NoiseSchedule::linear(steps, beta_start, beta_end, sigma_mode); }
  bool operator==(const ScheduleConfig&) const = default;
};

void to_json(nlohmann::json& j, const ScheduleConfig& c);
void from_json(const nlohmann::json& j, ScheduleConfig& c);

/// Everything needed to resume training or to sample.
struct Checkpoint {
  TrainState<float> state;
  ScheduleConfig schedule;
  /// Identifies the data the weights were trained on (see data_fingerprint).
  std::string fingerprint;
  /// Free-form provenance: stage, resample, config hashes.
  nlohmann::json meta = nlohmann::json::object();
};

/// FNV-1a 64 of `text`, as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

/// Hash of the canonical JSON of `document`.
std::string fingerprint_of(const nlohmann::json& document);

/// Writes a versioned, length-prefixed binary file with a trailing checksum.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Reads and validates a checkpoint; the schedule arrays must match a rebuild
/// of the stored schedule parameters bit for bit.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws CheckpointError unless the checkpoint's fingerprint equals `expected`.
void require_fingerprint(const Checkpoint& ckpt, const std::string& expected, const std::string& what);

}  // namespace maskdiff
