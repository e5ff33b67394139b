// maskdiff: generate data, train, fine-tune, sample and evaluate from one
// JSON run config. Every command writes the resolved config and its own
// arguments into the output directory and logs JSON lines to stdout.

#include <omp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "maskdiff/checkpoint.hpp"
#include "maskdiff/eval.hpp"
#include "maskdiff/fewshot_data.hpp"
#include "maskdiff/image_io.hpp"
#include "maskdiff/pipeline.hpp"
#include "maskdiff/run_config.hpp"
#include "maskdiff/verify.hpp"

namespace fs = std::filesystem;
using namespace maskdiff;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> omega;
  int jobs = 0;
  int snapshot_every = 0;
};

class EventLog {
 public:
  explicit EventLog(const fs::path& file) : file_(file, std::ios::app) {}
  void operator()(nlohmann::json event) {
    event["time"] = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    const std::string line = event.dump();
    std::cout << line << std::endl;
    if (file_) file_ << line << '\n' << std::flush;
  }

 private:
  std::ofstream file_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

// Resolves the config, applies flag overrides that affect training, prepares
// the output directory and records how the command was invoked.
RunConfig prepare(const Common& c, const std::string& command, const nlohmann::json& args, bool seed_is_master) {
  RunConfig cfg = c.config_path.empty() ? toy_run_config() : load_run_config(c.config_path);
  if (c.seed && seed_is_master) cfg.seed = *c.seed;
  if (c.seed && !seed_is_master) cfg.sampler.seed = *c.seed;
  if (c.omega) cfg.sampler.omega = *c.omega;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (c.jobs > 0) cfg.jobs = c.jobs;
  cfg.validate();
  omp_set_num_threads(cfg.jobs);
  fs::create_directories(cfg.out_dir);
  write_run_config(cfg, fs::path(cfg.out_dir) / "config.json");
  write_text(fs::path(cfg.out_dir) / (command + ".args.json"), args.dump(2) + "\n");
  return cfg;
}

Checkpoint load_matching(const RunConfig& cfg, const fs::path& path) {
  Checkpoint ckpt = load_checkpoint(path);
  const int stage = ckpt.meta.value("stage", 0);
  const int resample = ckpt.meta.value("resample", 0);
  if (stage != 1 && stage != 2) throw CheckpointError("checkpoint " + path.string() + " has no stage record");
  require_fingerprint(ckpt, stage_fingerprint(cfg, stage, resample), "checkpoint " + path.string());
  return ckpt;
}

std::vector<int> all_classes(const RunConfig& cfg) {
  std::vector<int> ids(static_cast<std::size_t>(cfg.data.num_classes()));
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
  return ids;
}

Tensor<float> first_channel(const Tensor<float>& image) {
  const std::size_t plane = image.dim(1) * image.dim(2);
  return Tensor<float>(Shape{1, image.dim(1), image.dim(2)},
                       std::vector<float>(image.values().begin(), image.values().begin() + static_cast<std::ptrdiff_t>(plane)));
}

int cmd_gen(const RunConfig& cfg, int render) {
  EventLog log(fs::path(cfg.out_dir) / "events.jsonl");
  const auto records = build_manifest(cfg.data, cfg.protocol.n_shot_resamples);
  write_text(fs::path(cfg.out_dir) / "manifest.jsonl", manifest_jsonl(records));
  const auto classes = default_classes(cfg.data.num_classes());
  if (render > 0) {
    const fs::path dir = fs::path(cfg.out_dir) / "renders";
    fs::create_directories(dir);
    for (int cls = 0; cls < cfg.data.num_classes(); ++cls) {
      for (int i = 0; i < std::min(render, cfg.data.eval_per_class); ++i) {
        const auto id = instance_id(Split::kEval, 0, cls, static_cast<std::uint32_t>(i));
        const Rendered r = render_by_id(cfg.data, classes, id);
        const std::string stem = "c" + std::to_string(cls) + "_" + std::to_string(i);
        write_pgm(dir / (stem + "_x.pgm"), first_channel(r.x));
        write_pgm(dir / (stem + "_mask.pgm"), r.y0);
        write_pgm(dir / (stem + "_support.pgm"), first_channel(support_crop(cfg.data, classes, id)));
      }
    }
  }
  log({{"event", "manifest_written"}, {"records", records.size()}});
  return 0;
}

int cmd_train_base(const RunConfig& cfg) {
  EventLog log(fs::path(cfg.out_dir) / "events.jsonl");
  const Checkpoint ckpt = run_stage1(cfg, std::ref(log));
  const fs::path path = fs::path(cfg.out_dir) / "stage1.ckpt";
  save_checkpoint(ckpt, path);
  log({{"event", "checkpoint_saved"}, {"path", path.string()}, {"fingerprint", ckpt.fingerprint}});
  return 0;
}

int cmd_finetune(const RunConfig& cfg, const std::string& base_path, int resample) {
  EventLog log(fs::path(cfg.out_dir) / "events.jsonl");
  const Checkpoint base = load_matching(cfg, base_path);
  const Checkpoint ckpt = run_stage2(cfg, base, resample, std::ref(log));
  const fs::path path = fs::path(cfg.out_dir) / ("stage2_r" + std::to_string(resample) + ".ckpt");
  save_checkpoint(ckpt, path);
  log({{"event", "checkpoint_saved"},
       {"path", path.string()},
       {"episodes_per_epoch", ckpt.meta["episodes_per_epoch"]},
       {"episodes_consumed", ckpt.meta["episodes_consumed"]}});
  return 0;
}

Tensor<float> slice(const Tensor<float>& batch, std::size_t i) {
  const std::size_t per = batch.size() / batch.dim(0);
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  return Tensor<float>(s, std::vector<float>(batch.values().begin() + static_cast<std::ptrdiff_t>(i * per),
                                             batch.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
}

int cmd_sample(const RunConfig& cfg, const std::string& ckpt_path, std::vector<int> classes, int per_class,
               int resample, int snapshot_every, bool unguided) {
  EventLog log(fs::path(cfg.out_dir) / "events.jsonl");
  const Checkpoint ckpt = load_matching(cfg, ckpt_path);
  if (classes.empty()) classes = all_classes(cfg);
  const auto table = default_classes(cfg.data.num_classes());
  const auto episodes = protocol_episodes(cfg, table, classes, per_class, resample);
  SamplerConfig sc = cfg.sampler;
  if (unguided) {
    sc.guided = false;
    sc.omega = 1.0;
  }
  const auto result = sample_from_checkpoint(ckpt, episodes, sc, cfg.protocol.sample_batch, snapshot_every);
  const fs::path dir = fs::path(cfg.out_dir) / "masks";
  fs::create_directories(dir);
  std::ostringstream csv;
  csv << "instance_id,class,iou,file\n";
  csv.precision(17);
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const Tensor<float> mask = slice(result.masks, i);
    const std::string name = "mask_" + std::to_string(episodes[i].instance_id) + "_s" + std::to_string(sc.seed) + ".pgm";
    write_pgm(dir / name, mask);
    csv << episodes[i].instance_id << ',' << episodes[i].cls << ',' << iou(mask, episodes[i].y0) << ',' << name << '\n';
    for (const auto& [t, y] : result.snapshots) {
      write_pgm(dir / ("snap_" + std::to_string(episodes[i].instance_id) + "_s" + std::to_string(sc.seed) + "_t" +
                       std::to_string(t) + ".pgm"),
                chain_to_unit(slice(y, i)));
    }
  }
  write_text(fs::path(cfg.out_dir) / "samples.csv", csv.str());
  log({{"event", "samples_written"}, {"count", episodes.size()}, {"dir", dir.string()}});
  return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt_path, bool factory, bool unguided, const std::string& label) {
  EventLog log(fs::path(cfg.out_dir) / "events.jsonl");
  const Checkpoint given = load_matching(cfg, ckpt_path);
  const auto table = default_classes(cfg.data.num_classes());
  SamplerConfig sc = cfg.sampler;
  if (unguided) {
    sc.guided = false;
    sc.omega = 1.0;
  }
  Protocol protocol{factory ? cfg.protocol.n_shot_resamples : 1, cfg.protocol.n_seeds, cfg.sampler.seed};
  if (factory && given.meta.value("stage", 0) != 1) throw CheckpointError("--factory needs a stage-1 checkpoint");
  const ResampleRunner run = [&](int resample, const Protocol& p) {
    const auto episodes = protocol_episodes(cfg, table, all_classes(cfg), cfg.protocol.eval_per_class,
                                            factory ? resample : given.meta.value("resample", 0));
    if (!factory) return score_seeds(given, episodes, p, sc, cfg.protocol.sample_batch);
    const fs::path path = fs::path(cfg.out_dir) / ("stage2_r" + std::to_string(resample) + ".ckpt");
    const Checkpoint tuned = cached_checkpoint(
        path, stage_fingerprint(cfg, 2, resample), [&] { return run_stage2(cfg, given, resample, std::ref(log)); },
        std::ref(log));
    return score_seeds(tuned, episodes, p, sc, cfg.protocol.sample_batch);
  };
  std::vector<RawRow> raw;
  const EvalReport report = stability_eval(label, protocol, run, &raw, [&](const std::string& w) {
    log({{"event", "warning"}, {"message", w}});
  });
  const fs::path out(cfg.out_dir);
  write_text(out / (label + ".report.json"), nlohmann::json(report).dump(2) + "\n");
  write_text(out / (label + ".report.txt"), report_table(report));
  write_text(out / (label + ".raw.csv"), raw_csv(raw));
  std::cout << report_table(report);
  log({{"event", "report_written"}, {"mean_iou", report.mean_iou}, {"seed_axis_std", report.seed_axis_std},
       {"failed_runs", report.failed_runs}});
  return report.failed_runs == 0 ? 0 : 2;
}

int cmd_verify(std::uint64_t seed) {
  bool ok = true;
  for (const auto& r : verify::run_analytic_suites(seed)) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << "  (" << r.value << " vs " << r.tolerance << ") "
              << r.detail << "\n";
    ok = ok && r.pass;
  }
  std::cout << (ok ? "all suites passed" : "some suites FAILED") << std::endl;
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conditional mask diffusion: data, training, sampling, evaluation"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "run config JSON (defaults to the built-in toy run)");
    sub->add_option("--seed", common.seed, "master seed (gen/train) or sampling seed (sample/eval)");
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--omega", common.omega, "guidance weight");
    sub->add_option("--jobs", common.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--snapshot-every", common.snapshot_every, "write y_t every N steps (sample)")
        ->check(CLI::NonNegativeNumber);
  };

  auto* gen = app.add_subcommand("gen", "write the dataset manifest");
  add_common(gen);
  int render = 0;
  gen->add_option("--render", render, "also write N example renders per class");

  auto* train_base = app.add_subcommand("train-base", "stage 1: train on base classes");
  add_common(train_base);

  std::string ckpt_path;
  int resample = 0;
  auto* finetune = app.add_subcommand("finetune", "stage 2: fine-tune on the balanced K-shot set");
  add_common(finetune);
  finetune->add_option("--checkpoint", ckpt_path, "stage-1 checkpoint")->required();
  finetune->add_option("--resample", resample, "shot resample index")->check(CLI::NonNegativeNumber);

  auto* sample = app.add_subcommand("sample", "sample masks for held-out episodes");
  add_common(sample);
  std::vector<int> classes;
  int per_class = 1;
  bool unguided = false;
  sample->add_option("--checkpoint", ckpt_path, "checkpoint to sample from")->required();
  sample->add_option("--classes", classes, "class ids (default: all)");
  sample->add_option("--per-class", per_class, "held-out episodes per class");
  sample->add_option("--resample", resample, "shot resample providing the supports");
  sample->add_flag("--unguided", unguided, "conditional pass only (omega = 1)");

  auto* eval = app.add_subcommand("eval", "stability protocol: shot resamples x seeds");
  add_common(eval);
  bool factory = false;
  std::string label = "eval";
  eval->add_option("--checkpoint", ckpt_path, "checkpoint (stage 1 with --factory)")->required();
  eval->add_flag("--factory", factory, "fine-tune one checkpoint per shot resample from the stage-1 checkpoint");
  eval->add_flag("--unguided", unguided, "conditional pass only (omega = 1)");
  eval->add_option("--label", label, "report file prefix");

  auto* verify_cmd = app.add_subcommand("verify", "analytic suites: schedule, posterior, gradients, guidance");
  add_common(verify_cmd);

  CLI11_PARSE(app, argc, argv);

  nlohmann::json args = nlohmann::json::array();
  for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
  try {
    if (*gen) return cmd_gen(prepare(common, "gen", args, true), render);
    if (*train_base) return cmd_train_base(prepare(common, "train-base", args, true));
    if (*finetune) return cmd_finetune(prepare(common, "finetune", args, true), ckpt_path, resample);
    if (*sample) {
      return cmd_sample(prepare(common, "sample", args, false), ckpt_path, classes, per_class, resample,
                        common.snapshot_every, unguided);
    }
    if (*eval) return cmd_eval(prepare(common, "eval", args, false), ckpt_path, factory, unguided, label);
    if (*verify_cmd) {
      if (common.jobs > 0) omp_set_num_threads(common.jobs);
      return cmd_verify(common.seed.value_or(20240611));
    }
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"event", "error"}, {"message", e.what()}}.dump() << std::endl;
    return 1;
  }
  return 1;
}
