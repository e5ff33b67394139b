// Acceptance runs: one PASS/FAIL line per criterion.
//
//   maskdiff_acceptance --criterion 6 --cache-dir build/acceptance_cache
//
// Criteria 6 and 7 share trained checkpoints through the cache directory.
// `--finetune-resamples` trains stage 1 and the stage-2 checkpoint of every
// shot resample and exits. Reloaded checkpoints carry their training time,
// which criterion 6 adds to its clock; criterion 7 times evaluation only.

#include <omp.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "maskdiff/pipeline.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/verify.hpp"

using namespace maskdiff;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

struct Verdict {
  bool pass = false;
  std::string summary;
  double seconds = 0;
  double budget = 0;
};

void report(int n, const std::string& name, const Verdict& v) {
  const bool in_time = v.seconds <= v.budget;
  std::cout << "criterion " << n << ' ' << (v.pass && in_time ? "PASS" : "FAIL") << "  " << name << ": " << v.summary
            << "; runtime " << fmt(v.seconds, 3) << " s (budget " << v.budget << " s)" << std::endl;
}

// Trains or reloads a checkpoint; the wall time of the training itself is
// kept in the checkpoint so a reload still accounts for it.
Checkpoint timed_checkpoint(const fs::path& path, const std::string& fingerprint,
                            const std::function<Checkpoint()>& make) {
  return cached_checkpoint(path, fingerprint, [&] {
    const auto t0 = Clock::now();
    Checkpoint c = make();
    c.meta["wall_seconds"] = seconds_since(t0);
    return c;
  });
}

double wall_seconds(const Checkpoint& c) { return c.meta.value("wall_seconds", 0.0); }

double mean_over_classes(const std::map<int, double>& per_class) {
  double s = 0;
  for (const auto& [cls, v] : per_class) s += v;
  return per_class.empty() ? 0.0 : s / static_cast<double>(per_class.size());
}

Verdict from_checks(const std::vector<verify::CheckResult>& checks, Clock::time_point t0, double budget) {
  Verdict v{true, {}, 0, budget};
  double worst_ratio = 0;
  std::string worst;
  for (const auto& c : checks) {
    if (!c.pass) {
      v.pass = false;
      v.summary += "failed " + c.name + " (" + fmt(c.value) + " vs " + fmt(c.tolerance) + "); ";
    }
    const double ratio = c.tolerance > 0 ? c.value / c.tolerance : 0;
    if (ratio >= worst_ratio) {
      worst_ratio = ratio;
      worst = c.name + " " + fmt(c.value) + " vs " + fmt(c.tolerance);
    }
  }
  v.summary += std::to_string(checks.size()) + " checks, tightest: " + worst;
  v.seconds = seconds_since(t0);
  return v;
}

const NoiseSchedule& default_schedule() {
  static const NoiseSchedule s = NoiseSchedule::linear(1000, 1e-4, 0.02);
  return s;
}

Verdict criterion1() {
  const auto t0 = Clock::now();
  std::vector<verify::CheckResult> checks;
  for (int T : {4, 100, 1000}) checks.push_back(verify::schedule_identities(T));
  const double abar = default_schedule().alpha_bar(1000);
  checks.push_back({"abar_1000 < 0.02", abar < 0.02, abar, 0.02, {}});
  return from_checks(checks, t0, 1);
}

Verdict criterion2(std::mt19937_64& rng) {
  const auto t0 = Clock::now();
  return from_checks({verify::posterior_oracle(default_schedule(), rng, 10, 1e-6)}, t0, 10);
}

Verdict criterion3(std::mt19937_64& rng, std::uint64_t seed) {
  const auto t0 = Clock::now();
  auto checks = verify::primitive_gradient_suite(rng, 1e-4);
  checks.push_back(verify::denoiser_loss_gradient(seed, 24, 1e-4));
  return from_checks(checks, t0, 120);
}

Verdict criterion4(std::mt19937_64& rng) {
  const auto t0 = Clock::now();
  double worst = 0;
  for (const auto& m : verify::chain_consistency(default_schedule(), {10, 500, 1000}, 100000, rng)) {
    worst = std::max({worst, std::fabs(m.z_mean), std::fabs(m.z_var)});
  }
  return {worst <= 4.0, "max standardized error " + fmt(worst) + " (limit 4) at t in {10, 500, 1000}, 1e5 trials",
          seconds_since(t0), 60};
}

Verdict criterion5(std::mt19937_64& rng, std::uint64_t seed) {
  const auto t0 = Clock::now();
  return from_checks({verify::guidance_linearity(rng, 20), verify::omega_one_matches_conditional(seed)}, t0, 10);
}

struct ToyRun {
  RunConfig config;
  std::vector<ShapeClass> classes;
  fs::path dir;

  Checkpoint stage1() const {
    return timed_checkpoint(dir / "stage1.ckpt", stage_fingerprint(config, 1), [&] { return run_stage1(config); });
  }
  Checkpoint stage2(const Checkpoint& base, int resample) const {
    return timed_checkpoint(dir / ("stage2_r" + std::to_string(resample) + ".ckpt"),
                            stage_fingerprint(config, 2, resample),
                            [&] { return run_stage2(config, base, resample); });
  }
};

ToyRun toy(const fs::path& cache) {
  ToyRun t{toy_run_config(), {}, cache / "toy"};
  t.classes = default_classes(t.config.data.num_classes());
  fs::create_directories(t.dir);
  return t;
}

Verdict criterion6(const fs::path& cache) {
  const ToyRun run = toy(cache);
  const RunConfig& cfg = run.config;
  const Checkpoint s1 = run.stage1();
  const Checkpoint s2 = run.stage2(s1, 0);

  const auto t0 = Clock::now();
  const int per_class = cfg.data.eval_per_class;
  const auto base_eps = protocol_episodes(cfg, run.classes, cfg.data.base_classes(), per_class, 0);
  const auto novel_eps = protocol_episodes(cfg, run.classes, cfg.data.novel_classes(), per_class, 0);
  const int batch = cfg.protocol.sample_batch;
  const double base = mean_over_classes(class_iou(s1, base_eps, cfg.sampler, batch));
  const double novel1 = mean_over_classes(class_iou(s1, novel_eps, cfg.sampler, batch));
  const double novel2 = mean_over_classes(class_iou(s2, novel_eps, cfg.sampler, batch));
  const double eval_s = seconds_since(t0);

  Verdict v;
  v.pass = base >= 0.6 && novel2 >= 0.4 && novel2 > novel1;
  v.summary = "base IoU " + fmt(base) + " (>= 0.6), novel IoU " + fmt(novel2) + " (>= 0.4) after stage 2 vs " +
              fmt(novel1) + " after stage 1 (must improve); omega " + fmt(cfg.sampler.omega) + ", " +
              std::to_string(per_class) + " held-out episodes per class; stage 1 " + fmt(wall_seconds(s1), 3) +
              " s, stage 2 " + fmt(wall_seconds(s2), 3) + " s, eval " + fmt(eval_s, 3) + " s";
  v.seconds = wall_seconds(s1) + wall_seconds(s2) + eval_s;
  v.budget = 1800;
  return v;
}

int finetune_resamples(const fs::path& cache) {
  const ToyRun run = toy(cache);
  const Checkpoint s1 = run.stage1();
  for (int r = 0; r < run.config.protocol.n_shot_resamples; ++r) {
    const auto c = run.stage2(s1, r);
    std::cout << "resample " << r << ": stage 2 ready (" << fmt(wall_seconds(c), 3) << " s of training)" << std::endl;
  }
  return 0;
}

Verdict criterion7(const fs::path& cache, int per_class) {
  const ToyRun run = toy(cache);
  const RunConfig& cfg = run.config;
  const Checkpoint s1 = run.stage1();
  const Protocol protocol{cfg.protocol.n_shot_resamples, cfg.protocol.n_seeds, cfg.sampler.seed};

  const auto t0 = Clock::now();
  double finetune_s = 0;
  std::map<int, Checkpoint> tuned;
  auto checkpoint_for = [&](int r) -> const Checkpoint& {
    auto it = tuned.find(r);
    if (it == tuned.end()) {
      const auto f0 = Clock::now();
      it = tuned.emplace(r, run.stage2(s1, r)).first;
      finetune_s += seconds_since(f0);
    }
    return it->second;
  };
  auto evaluate = [&](const std::string& label, SamplerConfig sc) {
    return stability_eval(label, protocol, [&](int r, const Protocol& p) {
      const auto eps = protocol_episodes(cfg, run.classes, cfg.data.novel_classes(), per_class, r);
      return score_seeds(checkpoint_for(r), eps, p, sc, cfg.protocol.sample_batch);
    });
  };
  SamplerConfig guided = cfg.sampler;
  guided.guided = true;
  guided.omega = 5.0;
  SamplerConfig unguided = cfg.sampler;
  unguided.guided = false;
  unguided.omega = 1.0;
  const EvalReport g = evaluate("guided", guided);
  const EvalReport u = evaluate("unguided", unguided);

  fs::create_directories(run.dir / "stability");
  for (const auto* r : {&g, &u}) {
    std::ofstream(run.dir / "stability" / (r->label + ".report.json")) << nlohmann::json(*r).dump(2) << "\n";
  }

  Verdict v;
  const bool complete = g.failed_runs == 0 && u.failed_runs == 0;
  v.pass = complete && g.seed_axis_std <= u.seed_axis_std + 0.01;
  v.summary = std::to_string(protocol.n_shot_resamples) + "x" + std::to_string(protocol.n_seeds) +
              " matrix on novel classes (" + std::to_string(per_class) + " episodes per class): seed-axis std guided " +
              fmt(g.seed_axis_std) + " vs unguided " + fmt(u.seed_axis_std) + " + 0.01; mean IoU guided " +
              fmt(g.mean_iou) + ", unguided " + fmt(u.mean_iou) + "; failed runs " +
              std::to_string(g.failed_runs + u.failed_runs);
  if (finetune_s > 1.0) v.summary += "; " + fmt(finetune_s, 3) + " s spent fine-tuning missing checkpoints";
  v.seconds = seconds_since(t0);
  v.budget = 1200;
  return v;
}

Verdict criterion8(const fs::path& cache, std::mt19937_64& rng) {
  const auto t0 = Clock::now();
  RunConfig cfg = toy_run_config();
  cfg.schedule = ScheduleConfig{50, 2e-3, 0.4, SigmaMode::kPosterior};
  cfg.stage1.steps = 300;
  const auto classes = default_classes(cfg.data.num_classes());
  fs::create_directories(cache / "vub");
  const Checkpoint trained = timed_checkpoint(cache / "vub" / "t50.ckpt", stage_fingerprint(cfg, 1),
                                              [&] { return run_stage1(cfg); });
  // A reloaded checkpoint still charges its training time to this criterion.
  const double train_s = std::max(seconds_since(t0), wall_seconds(trained));
  const auto t_rest = Clock::now();
  RunConfig fresh = cfg;
  fresh.stage1.steps = 0;
  const Checkpoint untrained = run_stage1(fresh);
  const NoiseSchedule s = cfg.schedule.build();

  const auto episodes = protocol_episodes(cfg, classes, [&] {
    std::vector<int> all(static_cast<std::size_t>(cfg.data.num_classes()));
    std::iota(all.begin(), all.end(), 0);
    return all;
  }(), 2, 0);
  VubOptions exact;
  exact.exact = true;
  const auto t_eval = Clock::now();
  auto total = [&](const ParamSet<float>& params) {
    const Denoiser<float> net(cfg.denoiser, params);
    double sum = 0;
    for (const auto& e : episodes) {
      auto stream = make_stream(cfg.seed, e.instance_id);  // equal y_t draws for both networks
      sum += vub_terms<float>(net, s, e, stream, exact).sum_l_t;
    }
    return sum / static_cast<double>(episodes.size());
  };
  const double before = total(untrained.state.params.ema);
  const double after = total(trained.state.params.ema);
  const double eval_s = seconds_since(t_eval);
  const auto oracle = verify::oracle_vub(s, rng, 1e-10);

  Verdict v;
  v.pass = after < before && oracle.pass;
  v.summary = "mean sum L_t over " + std::to_string(episodes.size()) + " held-out episodes " + fmt(before) +
              " untrained -> " + fmt(after) + " after " + std::to_string(cfg.stage1.steps) +
              " steps; oracle stub max L_t " + fmt(oracle.value) + " (<= 1e-10); training " +
              fmt(wall_seconds(trained), 3) + " s, bound evaluation " + fmt(eval_s, 3) + " s";
  v.seconds = train_s + seconds_since(t_rest);
  v.budget = 120;
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria 1-8"};
  int criterion = 0;
  std::string cache = "acceptance_cache";
  std::uint64_t seed = 20240611;
  int jobs = 0;
  int per_class = 1;
  bool prepare = false;
  app.add_option("--criterion", criterion, "criterion number, 0 for all")->check(CLI::Range(0, 8));
  app.add_option("--cache-dir", cache, "directory for trained checkpoints");
  app.add_option("--seed", seed, "seed for the analytic checks");
  app.add_option("--jobs", jobs, "worker threads (default: OpenMP default)");
  app.add_option("--stability-per-class", per_class, "held-out novel episodes per class in the criterion-7 matrix");
  app.add_flag("--finetune-resamples", prepare, "train the stage-2 checkpoints of every shot resample and exit");
  CLI11_PARSE(app, argc, argv);
  if (jobs > 0) omp_set_num_threads(jobs);
  fs::create_directories(cache);

  try {
    if (prepare) return finetune_resamples(cache);
    std::mt19937_64 rng(seed);
    bool ok = true;
    auto run = [&](int n, const std::string& name, const std::function<Verdict()>& f) {
      if (criterion != 0 && criterion != n) return;
      const Verdict v = f();
      report(n, name, v);
      ok = ok && v.pass && v.seconds <= v.budget;
    };
    run(1, "schedule identities", [&] { return criterion1(); });
    run(2, "posterior oracle", [&] { return criterion2(rng); });
    run(3, "gradient suite", [&] { return criterion3(rng, seed); });
    run(4, "forward-chain consistency", [&] { return criterion4(rng); });
    run(5, "guidance algebra", [&] { return criterion5(rng, seed); });
    run(6, "toy two-stage run", [&] { return criterion6(cache); });
    run(7, "stability protocol", [&] { return criterion7(cache, per_class); });
    run(8, "variational bound sanity", [&] { return criterion8(cache, rng); });
    return ok ? 0 : 1;
  } catch (const std::exception& e) {
    std::cout << "criterion " << criterion << " FAIL  error: " << e.what() << std::endl;
    return 1;
  }
}
