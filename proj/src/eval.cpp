#include "maskdiff/eval.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace maskdiff {

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size()));
}

double iou(const Tensor<float>& a, const Tensor<float>& b) {
  require_same_shape(a.shape(), b.shape(), "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float x = a[i], y = b[i];
    if ((x != 0.0f && x != 1.0f) || (y != 0.0f && y != 1.0f)) throw std::invalid_argument("iou: masks must be binary");
    inter += (x == 1.0f && y == 1.0f);
    uni += (x == 1.0f || y == 1.0f);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<double> iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

std::vector<SweepPoint> threshold_sweep(const std::vector<double>& ious) {
  std::vector<SweepPoint> out;
  for (double t : iou_thresholds()) {
    std::size_t hit = 0;
    for (double v : ious) hit += v >= t;
    out.push_back({t, ious.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(ious.size())});
  }
  return out;
}

std::vector<SweepPoint> threshold_sweep(const std::vector<Tensor<float>>& predictions,
                                        const std::vector<Tensor<float>>& ground_truths) {
  if (predictions.size() != ground_truths.size()) throw std::invalid_argument("threshold_sweep: count mismatch");
  std::vector<double> ious;
  for (std::size_t i = 0; i < predictions.size(); ++i) ious.push_back(iou(predictions[i], ground_truths[i]));
  return threshold_sweep(ious);
}

EvalReport aggregate(const std::string& label, const Protocol& protocol,
                     const std::vector<std::vector<RunOutcome>>& outcomes, std::vector<RawRow>* raw) {
  if (static_cast<int>(outcomes.size()) != protocol.n_shot_resamples) {
    throw std::invalid_argument("aggregate: expected one outcome list per shot resample");
  }
  EvalReport r;
  r.label = label;
  r.n_shot_resamples = protocol.n_shot_resamples;
  r.n_seeds = protocol.n_seeds;
  std::vector<double> cell_means, all_ious, seed_stds, resample_means;
  std::map<int, std::vector<double>> by_class;
  for (int ri = 0; ri < protocol.n_shot_resamples; ++ri) {
    const auto& row = outcomes[static_cast<std::size_t>(ri)];
    if (static_cast<int>(row.size()) != protocol.n_seeds) {
      throw std::invalid_argument("aggregate: expected one outcome per seed");
    }
    std::vector<double> seeds_here;
    bool complete = true;
    for (int si = 0; si < protocol.n_seeds; ++si) {
      const RunOutcome& o = row[static_cast<std::size_t>(si)];
      RunCell cell{ri, si, protocol.seed(si), o.ok, o.error, 0.0};
      if (o.ok && o.scores.empty()) {
        cell.ok = false;
        cell.error = "no episodes scored";
      }
      if (cell.ok) {
        std::vector<double> v;
        for (const auto& s : o.scores) {
          v.push_back(s.iou);
          all_ious.push_back(s.iou);
          by_class[s.cls].push_back(s.iou);
          if (raw) raw->push_back({ri, si, cell.seed, s.instance_id, s.cls, s.iou});
        }
        cell.mean_iou = mean_of(v);
        cell_means.push_back(cell.mean_iou);
        seeds_here.push_back(cell.mean_iou);
      } else {
        ++r.failed_runs;
        complete = false;
      }
      r.cells.push_back(std::move(cell));
    }
    if (complete) {
      seed_stds.push_back(population_std(seeds_here));
      resample_means.push_back(mean_of(seeds_here));
    }
  }
  r.mean_iou = mean_of(cell_means);
  r.overall_std = population_std(cell_means);
  r.seed_axis_std = mean_of(seed_stds);
  r.resample_axis_std = population_std(resample_means);
  for (const auto& [cls, v] : by_class) r.per_class_mean_iou[cls] = mean_of(v);
  r.sweep = threshold_sweep(all_ious);
  r.episodes_scored = all_ious.size();
  return r;
}

EvalReport stability_eval(const std::string& label, const Protocol& protocol, const ResampleRunner& run,
                          std::vector<RawRow>* raw, const EvalWarning& warn) {
  if (protocol.n_shot_resamples < 1 || protocol.n_seeds < 1) {
    throw std::invalid_argument("stability_eval: the run matrix must be at least 1 x 1");
  }
  std::vector<std::vector<RunOutcome>> outcomes;
  for (int r = 0; r < protocol.n_shot_resamples; ++r) {
    std::vector<RunOutcome> row;
    try {
      row = run(r, protocol);
      if (static_cast<int>(row.size()) != protocol.n_seeds) {
        throw std::runtime_error("runner returned " + std::to_string(row.size()) + " outcomes");
      }
    } catch (const std::exception& e) {
      row.assign(static_cast<std::size_t>(protocol.n_seeds), RunOutcome{false, e.what(), {}});
    }
    for (int s = 0; s < protocol.n_seeds; ++s) {
      const auto& o = row[static_cast<std::size_t>(s)];
      if (!o.ok && warn) {
        warn("run (resample " + std::to_string(r) + ", seed " + std::to_string(s) + ") failed and is excluded: " +
             o.error);
      }
    }
    outcomes.push_back(std::move(row));
  }
  return aggregate(label, protocol, outcomes, raw);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"resample", c.resample},
                     {"seed_index", c.seed_index},
                     {"seed", c.seed},
                     {"ok", c.ok},
                     {"error", c.error},
                     {"mean_iou", c.mean_iou}});
  }
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [cls, v] : r.per_class_mean_iou) per_class[std::to_string(cls)] = v;
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& p : r.sweep) sweep.push_back({{"threshold", p.threshold}, {"success_rate", p.success_rate}});
  j = nlohmann::json{{"label", r.label},
                     {"n_shot_resamples", r.n_shot_resamples},
                     {"n_seeds", r.n_seeds},
                     {"mean_iou", r.mean_iou},
                     {"overall_std", r.overall_std},
                     {"seed_axis_std", r.seed_axis_std},
                     {"resample_axis_std", r.resample_axis_std},
                     {"per_class_mean_iou", per_class},
                     {"sweep", sweep},
                     {"failed_runs", r.failed_runs},
                     {"episodes_scored", r.episodes_scored},
                     {"cells", cells}};
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r = EvalReport{};
  r.label = j.at("label").get<std::string>();
  r.n_shot_resamples = j.at("n_shot_resamples").get<int>();
  r.n_seeds = j.at("n_seeds").get<int>();
  r.mean_iou = j.at("mean_iou").get<double>();
  r.overall_std = j.at("overall_std").get<double>();
  r.seed_axis_std = j.at("seed_axis_std").get<double>();
  r.resample_axis_std = j.at("resample_axis_std").get<double>();
  for (const auto& [k, v] : j.at("per_class_mean_iou").items()) r.per_class_mean_iou[std::stoi(k)] = v.get<double>();
  for (const auto& p : j.at("sweep")) r.sweep.push_back({p.at("threshold").get<double>(), p.at("success_rate").get<double>()});
  r.failed_runs = j.at("failed_runs").get<int>();
  r.episodes_scored = j.at("episodes_scored").get<std::size_t>();
  for (const auto& c : j.at("cells")) {
    r.cells.push_back({c.at("resample").get<int>(), c.at("seed_index").get<int>(), c.at("seed").get<std::uint64_t>(),
                       c.at("ok").get<bool>(), c.at("error").get<std::string>(), c.at("mean_iou").get<double>()});
  }
}

bool operator==(const EvalReport& a, const EvalReport& b) {
  if (a.cells.size() != b.cells.size() || a.sweep.size() != b.sweep.size()) return false;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    const auto &x = a.cells[i], &y = b.cells[i];
    if (x.resample != y.resample || x.seed_index != y.seed_index || x.seed != y.seed || x.ok != y.ok ||
        x.error != y.error || x.mean_iou != y.mean_iou) {
      return false;
    }
  }
  for (std::size_t i = 0; i < a.sweep.size(); ++i) {
    if (a.sweep[i].threshold != b.sweep[i].threshold || a.sweep[i].success_rate != b.sweep[i].success_rate) return false;
  }
  return a.label == b.label && a.n_shot_resamples == b.n_shot_resamples && a.n_seeds == b.n_seeds &&
         a.mean_iou == b.mean_iou && a.overall_std == b.overall_std && a.seed_axis_std == b.seed_axis_std &&
         a.resample_axis_std == b.resample_axis_std && a.per_class_mean_iou == b.per_class_mean_iou &&
         a.failed_runs == b.failed_runs && a.episodes_scored == b.episodes_scored;
}

std::string raw_csv(const std::vector<RawRow>& rows) {
  std::ostringstream os;
  os << "resample,seed_index,seed,instance_id,class,iou\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.resample << ',' << r.seed_index << ',' << r.seed << ',' << r.instance_id << ',' << r.cls << ',' << r.iou
       << '\n';
  }
  return os.str();
}

std::vector<RawRow> parse_raw_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<RawRow> rows;
  if (!std::getline(is, line) || line != "resample,seed_index,seed,instance_id,class,iou") {
    throw std::invalid_argument("raw csv: unexpected header");
  }
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    RawRow r;
    char c1, c2, c3, c4, c5;
    ls >> r.resample >> c1 >> r.seed_index >> c2 >> r.seed >> c3 >> r.instance_id >> c4 >> r.cls >> c5 >> r.iou;
    if (!ls || c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',' || c5 != ',') {
      throw std::invalid_argument("raw csv: malformed row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "report: " << r.label << "  (" << r.n_shot_resamples << " shot resamples x " << r.n_seeds << " seeds, "
     << r.failed_runs << " failed)\n";
  os << "mean IoU            " << r.mean_iou << " +- " << r.overall_std << "\n";
  os << "std across seeds    " << r.seed_axis_std << "\n";
  os << "std across resamples " << r.resample_axis_std << "\n";
  os << "per class:\n";
  for (const auto& [cls, v] : r.per_class_mean_iou) os << "  class " << cls << "  " << v << "\n";
  os << "IoU threshold  success rate\n";
  for (const auto& p : r.sweep) os << "  " << std::setprecision(2) << p.threshold << "        " << std::setprecision(4)
                                   << p.success_rate << "\n";
  os << "matrix (rows: resample, cols: seed)\n";
  for (int ri = 0; ri < r.n_shot_resamples; ++ri) {
    os << "  ";
    for (int si = 0; si < r.n_seeds; ++si) {
      const auto& c = r.cells[static_cast<std::size_t>(ri * r.n_seeds + si)];
      if (c.ok) {
        os << c.mean_iou << ' ';
      } else {
        os << "  fail ";
      }
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace maskdiff
