// Command-line front end: dataset generation, training, table export,
// the identity-weight sweep, the distillation ablation grid and stand-alone
// evaluation. Every failed invariant or audit exits nonzero.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <thread>

#include "pskd/harness.hpp"

namespace fs = std::filesystem;
using namespace pskd;

namespace {

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  if (path.empty()) {
    Config cfg;
    for (const auto& s : sets) cfg.set_pair(s);
    return ExperimentConfig::from_config(cfg);
  }
  return ExperimentConfig::load(path, sets);
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::string token;
  std::istringstream in(csv);
  while (std::getline(in, token, ',')) out.push_back(std::stod(token));
  return out;
}

std::vector<uint64_t> parse_seeds(const std::string& csv) {
  std::vector<uint64_t> out;
  std::string token;
  std::istringstream in(csv);
  while (std::getline(in, token, ',')) out.push_back(std::stoull(token));
  return out;
}

int default_jobs() {
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale person search training and distillation"};
  app.require_subcommand(1);
  app.fallthrough();  // --config/--set may follow the subcommand

  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "key=value configuration file")->envname("PSKD_CONFIG");
  app.add_option("--set", sets, "override a config key (key=value, repeatable)");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
  std::string gen_out = "dataset.psds";
  gen->add_option("--out", gen_out, "output path");

  auto* tr = app.add_subcommand("train", "train one model and evaluate it");
  std::string train_out;
  tr->add_option("--out-dir", train_out, "output directory (overrides config out_dir)");

  auto* ex = app.add_subcommand("export-lut", "export the lookup table of a checkpoint");
  std::string ex_ckpt, ex_out = "teacher.pslut";
  ex->add_option("--checkpoint", ex_ckpt, "checkpoint to read")->required();
  ex->add_option("--out", ex_out, "output table path");

  auto* sw = app.add_subcommand("sweep", "train across identity-loss weights");
  std::string sw_lambdas = "0.05,0.1,0.3,0.6,1.0";
  std::string sw_seeds = "0,1,2";
  int sw_jobs = default_jobs();
  sw->add_option("--lambdas", sw_lambdas, "comma-separated identity-loss weights");
  sw->add_option("--seeds", sw_seeds, "comma-separated seeds");
  sw->add_option("--jobs", sw_jobs, "parallel runs");

  auto* ab = app.add_subcommand("ablate", "run the distillation ablation grid");
  std::string ab_seeds = "0,1,2";
  int ab_jobs = default_jobs();
  std::string ab_teacher_dir;
  bool ab_reuse_only = false;
  ab->add_option("--seeds", ab_seeds, "comma-separated seeds");
  ab->add_option("--jobs", ab_jobs, "parallel runs");
  ab->add_option("--teacher-dir", ab_teacher_dir,
                 "directory holding/receiving teacher files (default <out_dir>)");
  ab->add_flag("--reuse-teachers", ab_reuse_only,
               "never train teachers; skip rows whose teacher files are missing");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string ev_ckpt, ev_data, ev_out = "eval_out";
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint to evaluate")->required();
  ev->add_option("--data", ev_data, "dataset file (default: generate from config)");
  ev->add_option("--out-dir", ev_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = load_config(config_path, sets);

    if (gen->parsed()) {
      DatasetSplit split = generate_dataset(cfg.data);
      write_dataset(split, gen_out);
      std::printf("wrote %s: %d ids, %zu train scenes, %zu gallery scenes, %zu queries\n",
                  gen_out.c_str(), split.num_ids, split.train.size(), split.gallery.size(),
                  split.queries.size());
    } else if (tr->parsed()) {
      if (!train_out.empty()) cfg.out_dir = train_out;
      RunResult r = train(cfg);
      std::printf("run complete: out_dir=%s lambda_oim=%g\n", cfg.out_dir.c_str(),
                  r.lambda_oim_effective);
      std::printf("  detection: map=%.4f recall=%.4f\n", r.metrics.detection.ap,
                  r.metrics.detection.recall);
      std::printf("  search:    map=%.4f top1=%.4f (queries=%d skipped=%d)\n",
                  r.metrics.search.map, r.metrics.search.top_k_rate, r.metrics.search.used,
                  r.metrics.search.skipped);
    } else if (ex->parsed()) {
      Checkpoint ck = read_checkpoint(ex_ckpt);
      write_lut(ck.lut, ex_out);
      std::printf("wrote %s: dim=%d ids=%d\n", ex_out.c_str(), ck.lut.dim(), ck.lut.num_ids());
    } else if (sw->parsed()) {
      SweepResult r = lambda_sweep(cfg, parse_doubles(sw_lambdas), parse_seeds(sw_seeds), sw_jobs);
      std::printf("sweep complete: %zu runs, results in %s/sweep.csv\n", r.rows.size(),
                  cfg.out_dir.c_str());
    } else if (ab->parsed()) {
      const std::string tdir = ab_teacher_dir.empty() ? cfg.out_dir : ab_teacher_dir;
      TeacherPaths teachers;
      if (ab_reuse_only) {
        teachers.detector = (fs::path(tdir) / "teachers" / "detector.psck").string();
        teachers.joint_lut = (fs::path(tdir) / "teachers" / "joint.pslut").string();
        teachers.weak_lut = (fs::path(tdir) / "teachers" / "joint_small.pslut").string();
        teachers.strong_lut = (fs::path(tdir) / "teachers" / "joint_long.pslut").string();
      } else {
        teachers = prepare_teachers(cfg, tdir, ab_jobs);
      }
      AblationResult r = run_ablation_suite(cfg, parse_seeds(ab_seeds), teachers, ab_jobs);
      int done = 0, skipped = 0;
      for (const auto& row : r.rows) (row.skipped ? skipped : done)++;
      std::printf("ablation complete: %d runs (%d skipped), results in %s/ablation.csv\n", done,
                  skipped, cfg.out_dir.c_str());
    } else if (ev->parsed()) {
      DatasetSplit split = ev_data.empty() ? generate_dataset(cfg.data) : read_dataset(ev_data);
      MetricsReport m = evaluate_checkpoint(ev_ckpt, split, cfg.detect, ev_out);
      std::printf("detection: map=%.4f recall=%.4f\n", m.detection.ap, m.detection.recall);
      std::printf("search:    map=%.4f top1=%.4f (queries=%d skipped=%d)\n", m.search.map,
                  m.search.top_k_rate, m.search.used, m.search.skipped);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
