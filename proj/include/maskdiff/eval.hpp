#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskdiff/tensor.hpp"

namespace maskdiff {

/// |a & b| / |a | b| over {0,1} masks; 1 when both are empty.
double iou(const Tensor<float>& a, const Tensor<float>& b);

/// 0.50, 0.55, ..., 0.95.
std::vector<double> iou_thresholds();

struct SweepPoint {
  double threshold;
  double success_rate;
};

/// Fraction of IoU values >= each threshold.
std::vector<SweepPoint> threshold_sweep(const std::vector<double>& ious);
/// Same, computed from masks.
std::vector<SweepPoint> threshold_sweep(const std::vector<Tensor<float>>& predictions,
                                        const std::vector<Tensor<float>>& ground_truths);

struct EpisodeScore {
  std::uint64_t instance_id = 0;
  int cls = 0;
  double iou = 0;
};

/// One cell of the run matrix.
struct RunOutcome {
  bool ok = true;
  std::string error;
  std::vector<EpisodeScore> scores;
};

struct Protocol {
  int n_shot_resamples = 10;
  int n_seeds = 10;
  std::uint64_t base_seed = 0;

  /// Inference seed of column `s`.
  std::uint64_t seed(int s) const { return base_seed + static_cast<std::uint64_t>(s); }
};

struct RunCell {
  int resample = 0;
  int seed_index = 0;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  double mean_iou = 0;
};

/// Aggregated run matrix.
///
/// seed_axis_std: mean over resamples of the population std across seeds.
/// resample_axis_std: population std across resamples of the per-resample
/// means over seeds. overall_std: population std over all successful cells.
/// Only resamples whose seeds all succeeded enter the per-axis statistics.
struct EvalReport {
  std::string label;
  int n_shot_resamples = 0;
  int n_seeds = 0;
  std::vector<RunCell> cells;
  double mean_iou = 0;
  double overall_std = 0;
  double seed_axis_std = 0;
  double resample_axis_std = 0;
  std::map<int, double> per_class_mean_iou;
  std::vector<SweepPoint> sweep;
  int failed_runs = 0;
  std::size_t episodes_scored = 0;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);
bool operator==(const EvalReport& a, const EvalReport& b);

/// Raw log row: one line per (resample, seed, episode).
struct RawRow {
  int resample = 0;
  int seed_index = 0;
  std::uint64_t seed = 0;
  std::uint64_t instance_id = 0;
  int cls = 0;
  double iou = 0;
};

/// Builds the report from raw per-run outcomes (outer index resample, inner seed).
EvalReport aggregate(const std::string& label, const Protocol& protocol,
                     const std::vector<std::vector<RunOutcome>>& outcomes, std::vector<RawRow>* raw = nullptr);

/// Produces the n_seeds outcomes of one shot resample. Throwing marks the whole
/// resample as failed.
using ResampleRunner = std::function<std::vector<RunOutcome>(int resample, const Protocol& protocol)>;
using EvalWarning = std::function<void(const std::string&)>;

/// Runs every resample, records failures (never averaging them in) and
/// reports each one through `warn`.
EvalReport stability_eval(const std::string& label, const Protocol& protocol, const ResampleRunner& run,
                          std::vector<RawRow>* raw = nullptr, const EvalWarning& warn = {});

std::string raw_csv(const std::vector<RawRow>& rows);
std::vector<RawRow> parse_raw_csv(const std::string& text);
std::string report_table(const EvalReport& r);

/// Population standard deviation.
double population_std(const std::vector<double>& v);

}  // namespace maskdiff
