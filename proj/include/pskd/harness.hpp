#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pskd/checkpoint.hpp"
#include "pskd/config.hpp"
#include "pskd/eval.hpp"
#include "pskd/kd.hpp"
#include "pskd/synth.hpp"

namespace pskd {

enum class KdMode { kNone, kDetector, kReid, kBoth };

std::string kd_mode_name(KdMode m);
KdMode kd_mode_from_name(const std::string& name);

struct OptimConfig {
  int steps = 2000;
  int batch = 2;
  double lr = 0.01;
  double momentum = 0.9;
  int warmup_steps = 300;       // linear ramp to the base rate
  double decay_fraction = 0.7;  // learning rate drops after this fraction of steps
  double decay_factor = 0.1;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  std::string out_dir = "run";
  SynthConfig data;
  std::string dataset_file;  // when set, loaded instead of generated
  BackboneSize backbone = BackboneSize::kLarge;
  int embed_dim = 32;
  OimConfig oim;
  bool lambda_explicit = false;  // oim.lambda was set by the user
  KdDetConfig kd;
  KdMode kd_mode = KdMode::kNone;
  std::string detector_teacher;  // checkpoint path, detector distillation
  std::string lut_teacher;       // exported table path, re-id distillation
  OptimConfig optim;
  DetectConfig detect;
  int log_every = 10;

  static ExperimentConfig from_config(const Config& cfg);
  static ExperimentConfig load(const std::string& path,
                               const std::vector<std::string>& overrides = {});
};

struct RunResult {
  MetricsReport metrics;
  double lambda_oim_effective = 0;
  uint64_t lut_checksum_start = 0;
  uint64_t lut_checksum_end = 0;
  uint64_t labeled_samples_seen = 0;
  uint64_t lut_skipped_writes = 0;
  int all_unlabeled_batches = 0;
  std::string checkpoint_path;
  std::string metrics_path;
};

/// Trains one student per the config, evaluates it on the gallery split and
/// writes metrics.csv, per_query.csv, loss_log.csv and checkpoint.psck into
/// cfg.out_dir. Frozen-table and teacher-immutability audits run on every
/// call and abort the run (nonzero exit from the CLI) on violation.
RunResult train(const ExperimentConfig& cfg);

/// Evaluates a stored checkpoint on a dataset and writes the metric files.
MetricsReport evaluate_checkpoint(const std::string& checkpoint_path, const DatasetSplit& data,
                                  const DetectConfig& detect_cfg, const std::string& out_dir);

struct SweepRow {
  double lambda = 0;
  uint64_t seed = 0;
  MetricsReport metrics;
};

struct SweepResult {
  std::vector<SweepRow> rows;  // one row per (lambda, seed)
  std::vector<double> lambdas;
};

/// Trains one run per (lambda, seed) and writes sweep.csv plus the per-lambda
/// median curves (sweep_curves.csv) used for the weight/performance plot.
SweepResult lambda_sweep(const ExperimentConfig& base, const std::vector<double>& lambdas,
                         const std::vector<uint64_t>& seeds, int jobs);

struct AblationRow {
  std::string name;
  double lambda = 0;
  KdMode mode = KdMode::kNone;
  std::string teacher;
  uint64_t seed = 0;
  bool skipped = false;
  MetricsReport metrics;
};

struct AblationResult {
  std::vector<AblationRow> rows;
};

struct TeacherPaths {
  std::string detector;    // pure-detector checkpoint
  std::string joint_lut;   // converged joint-model table (same backbone as teacher runs)
  std::string weak_lut;    // small-backbone joint-model table
  std::string strong_lut;  // longer-trained joint-model table
};

/// Trains the standard teacher set into <dir>/teachers (reusing files that
/// already exist) and returns their paths.
TeacherPaths prepare_teachers(const ExperimentConfig& base, const std::string& dir, int jobs);

/// Runs the distillation ablation grid (baseline, detector distillation at
/// two identity-loss weights, frozen-table distillation, the combination and
/// the teacher-quality rows) for every seed. Rows whose teacher file is
/// missing are skipped with a diagnostic.
AblationResult run_ablation_suite(const ExperimentConfig& base, const std::vector<uint64_t>& seeds,
                                  const TeacherPaths& teachers, int jobs);

void write_sweep_csv(const SweepResult& sweep, const std::string& dir);
void write_ablation_csv(const AblationResult& ablation, const std::string& dir);

/// Runs jobs on up to `jobs` threads; rethrows the first failure.
void run_parallel(std::vector<std::function<void()>> work, int jobs);

uint64_t file_checksum(const std::string& path);
double median(std::vector<double> values);

}  // namespace pskd
