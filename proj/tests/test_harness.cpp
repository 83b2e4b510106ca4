#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pskd/harness.hpp"

using namespace pskd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Small-everything config: seconds per run instead of minutes.
ExperimentConfig tiny_config(const std::string& out_dir, uint64_t seed) {
  Config cfg;
  cfg.set("seed", std::to_string(seed));
  cfg.set("out_dir", out_dir);
  cfg.set("dataset.num_ids", "4");
  cfg.set("dataset.num_unlabeled", "4");
  cfg.set("dataset.train_scenes", "8");
  cfg.set("dataset.gallery_scenes", "6");
  cfg.set("dataset.gallery_per_query", "4");
  cfg.set("dataset.queries_per_id", "1");
  cfg.set("dataset.image_size", "64");
  cfg.set("train.steps", "30");
  cfg.set("train.warmup", "5");
  cfg.set("train.batch", "1");
  return ExperimentConfig::from_config(cfg);
}

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("config parsing: types, comments, overrides, unknown keys") {
  Config cfg = Config::from_string(
      "# comment line\n"
      "seed = 7\n"
      "oim.tau=0.2   # trailing comment\n"
      "kd.mode=reid\n"
      "kd.lut_teacher=/tmp/x.pslut\n"
      "oim.lambda=0.4\n");
  ExperimentConfig e = ExperimentConfig::from_config(cfg);
  CHECK(e.seed == 7);
  CHECK(e.oim.temperature == doctest::Approx(0.2));
  CHECK(e.kd_mode == KdMode::kReid);
  CHECK(e.lambda_explicit);
  CHECK(e.oim.lambda == doctest::Approx(0.4));

  Config bad = Config::from_string("seed=7\ndataset.num_idz=3\n");
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_config(bad), doctest::Contains("num_idz"),
                       std::runtime_error);

  Config malformed = Config::from_string("oim.tau=abc\n");
  CHECK_THROWS_WITH_AS(ExperimentConfig::from_config(malformed), doctest::Contains("number"),
                       std::runtime_error);

  CHECK_THROWS_WITH_AS(Config::from_string("just a line\n"), doctest::Contains("key=value"),
                       std::runtime_error);
}

TEST_CASE("lambda defaults: baseline 1.0, frozen-table mode 0.1 unless overridden") {
  Config cfg;
  ExperimentConfig e = ExperimentConfig::from_config(cfg);
  CHECK(e.oim.lambda == doctest::Approx(1.0));
  CHECK_FALSE(e.lambda_explicit);
  CHECK(e.kd.hint_mean);  // experiment default; the raw loss still defaults to the sum
}

TEST_CASE("training is deterministic: identical files for identical config and seed") {
  const fs::path dir = temp_dir("pskd_harness_det");
  ExperimentConfig a = tiny_config((dir / "a").string(), 3);
  ExperimentConfig b = tiny_config((dir / "b").string(), 3);
  RunResult ra = train(a);
  RunResult rb = train(b);
  CHECK(slurp(ra.metrics_path) == slurp(rb.metrics_path));
  CHECK(slurp(ra.checkpoint_path) == slurp(rb.checkpoint_path));
  CHECK(slurp((dir / "a" / "loss_log.csv").string()) ==
        slurp((dir / "b" / "loss_log.csv").string()));

  ExperimentConfig c = tiny_config((dir / "c").string(), 4);
  RunResult rc = train(c);
  CHECK(slurp(ra.metrics_path) != slurp(rc.metrics_path));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round trip is byte-identical and validates its content") {
  const fs::path dir = temp_dir("pskd_harness_ck");
  ExperimentConfig cfg = tiny_config((dir / "run").string(), 1);
  RunResult r = train(cfg);

  Checkpoint ck = read_checkpoint(r.checkpoint_path);
  const std::string copy = (dir / "copy.psck").string();
  write_checkpoint(ck, copy);
  CHECK(slurp(r.checkpoint_path) == slurp(copy));
  CHECK(ck.step == 30);

  // restored model evaluates to the same metrics file
  DatasetSplit data = generate_dataset(cfg.data);
  MetricsReport m = evaluate_checkpoint(r.checkpoint_path, data, cfg.detect,
                                        (dir / "re_eval").string());
  CHECK(slurp(r.metrics_path) == slurp((dir / "re_eval" / "metrics.csv").string()));
  CHECK(m.detection.defined);

  // tampered version byte is rejected
  std::string bytes = slurp(copy);
  bytes[4] = 9;
  const std::string bad = (dir / "bad.psck").string();
  std::ofstream(bad, std::ios::binary) << bytes;
  CHECK_THROWS_WITH_AS(read_checkpoint(bad), doctest::Contains("version"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("divergence aborts with the step number") {
  const fs::path dir = temp_dir("pskd_harness_div");
  ExperimentConfig cfg = tiny_config((dir / "run").string(), 2);
  cfg.optim.lr = 1e6;
  cfg.optim.warmup_steps = 0;
  CHECK_THROWS_WITH_AS(train(cfg), doctest::Contains("diverged"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("frozen-table distillation: audits, counters and the 0.1 default weight") {
  const fs::path dir = temp_dir("pskd_harness_reid");
  ExperimentConfig teacher_cfg = tiny_config((dir / "teacher").string(), 11);
  RunResult teacher = train(teacher_cfg);

  Checkpoint ck = read_checkpoint(teacher.checkpoint_path);
  const std::string lut_path = (dir / "teacher.pslut").string();
  write_lut(ck.lut, lut_path);
  const std::string lut_before = slurp(lut_path);

  ExperimentConfig student_cfg = tiny_config((dir / "student").string(), 12);
  student_cfg.kd_mode = KdMode::kReid;
  student_cfg.lut_teacher = lut_path;
  RunResult student = train(student_cfg);

  CHECK(student.lambda_oim_effective == doctest::Approx(0.1));
  CHECK(student.lut_checksum_start == student.lut_checksum_end);
  CHECK(student.labeled_samples_seen > 0);
  CHECK(student.lut_skipped_writes == student.labeled_samples_seen);
  CHECK(slurp(lut_path) == lut_before);  // teacher artifact untouched

  // the student checkpoint carries the frozen table bit-exactly
  Checkpoint student_ck = read_checkpoint(student.checkpoint_path);
  CHECK(student_ck.lut.frozen());
  CHECK(student_ck.lut.data() == LookupTable::copy_frozen(read_lut(lut_path)).data());

  // explicit lambda override wins over the mode default
  ExperimentConfig override_cfg = tiny_config((dir / "student2").string(), 13);
  override_cfg.kd_mode = KdMode::kReid;
  override_cfg.lut_teacher = lut_path;
  override_cfg.oim.lambda = 0.3;
  override_cfg.lambda_explicit = true;
  RunResult student2 = train(override_cfg);
  CHECK(student2.lambda_oim_effective == doctest::Approx(0.3));

  // wrong identity space is rejected
  ExperimentConfig bad = tiny_config((dir / "student3").string(), 14);
  bad.kd_mode = KdMode::kReid;
  bad.lut_teacher = lut_path;
  bad.data.num_ids = 6;
  CHECK_THROWS_WITH_AS(train(bad), doctest::Contains("identity space"), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("detector distillation: teacher stays immutable, adapter is trained and saved") {
  const fs::path dir = temp_dir("pskd_harness_det2");
  ExperimentConfig teacher_cfg = tiny_config((dir / "teacher").string(), 21);
  teacher_cfg.oim.lambda = 0.0;
  teacher_cfg.lambda_explicit = true;
  RunResult teacher = train(teacher_cfg);
  const std::string teacher_before = slurp(teacher.checkpoint_path);

  ExperimentConfig student_cfg = tiny_config((dir / "student").string(), 22);
  student_cfg.kd_mode = KdMode::kDetector;
  student_cfg.detector_teacher = teacher.checkpoint_path;
  RunResult student = train(student_cfg);

  CHECK(slurp(teacher.checkpoint_path) == teacher_before);
  Checkpoint ck = read_checkpoint(student.checkpoint_path);
  bool has_adapter = false;
  for (const auto& [name, t] : ck.params) has_adapter |= name == "kd.adapt.w";
  CHECK(has_adapter);

  // missing teacher path is rejected up front
  ExperimentConfig missing = tiny_config((dir / "student2").string(), 23);
  missing.kd_mode = KdMode::kDetector;
  CHECK_THROWS_WITH_AS(train(missing), doctest::Contains("detector_teacher"),
                       std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("combined distillation trains with both teachers") {
  const fs::path dir = temp_dir("pskd_harness_both");
  ExperimentConfig det_cfg = tiny_config((dir / "det").string(), 31);
  det_cfg.oim.lambda = 0.0;
  det_cfg.lambda_explicit = true;
  RunResult det_teacher = train(det_cfg);
  ExperimentConfig oim_cfg = tiny_config((dir / "oim").string(), 32);
  RunResult oim_teacher = train(oim_cfg);
  const std::string lut_path = (dir / "t.pslut").string();
  write_lut(read_checkpoint(oim_teacher.checkpoint_path).lut, lut_path);

  ExperimentConfig both = tiny_config((dir / "student").string(), 33);
  both.kd_mode = KdMode::kBoth;
  both.detector_teacher = det_teacher.checkpoint_path;
  both.lut_teacher = lut_path;
  RunResult r = train(both);
  CHECK(r.lambda_oim_effective == doctest::Approx(0.1));
  CHECK(r.lut_checksum_start == r.lut_checksum_end);
  fs::remove_all(dir);
}

TEST_CASE("dataset file input path matches in-process generation") {
  const fs::path dir = temp_dir("pskd_harness_data");
  ExperimentConfig a = tiny_config((dir / "a").string(), 5);
  DatasetSplit split = generate_dataset(a.data);
  const std::string data_path = (dir / "d.psds").string();
  write_dataset(split, data_path);

  ExperimentConfig b = tiny_config((dir / "b").string(), 5);
  b.dataset_file = data_path;
  RunResult ra = train(a);
  RunResult rb = train(b);
  CHECK(slurp(ra.metrics_path) == slurp(rb.metrics_path));
  fs::remove_all(dir);
}

TEST_CASE("run_parallel preserves results and propagates failures") {
  std::vector<int> out(16, 0);
  std::vector<std::function<void()>> work;
  for (int i = 0; i < 16; ++i)
    work.push_back([&out, i] { out[static_cast<size_t>(i)] = i * i; });
  run_parallel(std::move(work), 4);
  for (int i = 0; i < 16; ++i) CHECK(out[static_cast<size_t>(i)] == i * i);

  std::vector<std::function<void()>> failing;
  failing.push_back([] {});
  failing.push_back([] { fail("boom"); });
  CHECK_THROWS_WITH_AS(run_parallel(std::move(failing), 2), doctest::Contains("boom"),
                       std::runtime_error);
}

TEST_CASE("median helper") {
  CHECK(median({3.0, 1.0, 2.0}) == doctest::Approx(2.0));
  CHECK(median({4.0, 1.0}) == doctest::Approx(2.5));
  CHECK(median({7.0}) == doctest::Approx(7.0));
  CHECK_THROWS_AS(median({}), std::runtime_error);
}
