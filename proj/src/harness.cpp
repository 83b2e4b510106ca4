#include "pskd/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "pskd/binio.hpp"

namespace fs = std::filesystem;

namespace pskd {

std::string kd_mode_name(KdMode m) {
  switch (m) {
    case KdMode::kNone: return "none";
    case KdMode::kDetector: return "det";
    case KdMode::kReid: return "reid";
    case KdMode::kBoth: return "both";
  }
  return "none";
}

KdMode kd_mode_from_name(const std::string& name) {
  if (name == "none") return KdMode::kNone;
  if (name == "det") return KdMode::kDetector;
  if (name == "reid") return KdMode::kReid;
  if (name == "both") return KdMode::kBoth;
  fail("unknown kd mode '" + name + "' (expected none|det|reid|both)");
}

ExperimentConfig ExperimentConfig::from_config(const Config& cfg) {
  ExperimentConfig e;
  e.seed = cfg.get_u64("seed", e.seed);
  e.out_dir = cfg.get_string("out_dir", e.out_dir);

  SynthConfig& d = e.data;
  d.seed = cfg.get_u64("dataset.seed", d.seed);
  d.num_ids = cfg.get_int("dataset.num_ids", d.num_ids);
  d.num_unlabeled = cfg.get_int("dataset.num_unlabeled", d.num_unlabeled);
  d.train_scenes = cfg.get_int("dataset.train_scenes", d.train_scenes);
  d.gallery_scenes = cfg.get_int("dataset.gallery_scenes", d.gallery_scenes);
  d.gallery_per_query = cfg.get_int("dataset.gallery_per_query", d.gallery_per_query);
  d.queries_per_id = cfg.get_int("dataset.queries_per_id", d.queries_per_id);
  d.image_size = cfg.get_int("dataset.image_size", d.image_size);
  d.max_persons = cfg.get_int("dataset.max_persons", d.max_persons);
  d.min_identity_dist = cfg.get_double("dataset.min_identity_dist", d.min_identity_dist);
  d.brightness_jitter = cfg.get_double("dataset.brightness_jitter", d.brightness_jitter);
  d.pixel_noise = cfg.get_double("dataset.pixel_noise", d.pixel_noise);
  d.texture_contrast = cfg.get_double("dataset.texture_contrast", d.texture_contrast);
  d.unlabeled_fraction = cfg.get_double("dataset.unlabeled_fraction", d.unlabeled_fraction);
  e.dataset_file = cfg.get_string("dataset.file", "");

  e.backbone = backbone_size_from_name(cfg.get_string("model.backbone", "large"));
  e.embed_dim = cfg.get_int("model.embed_dim", e.embed_dim);

  e.oim.queue_size = cfg.get_int("oim.queue", e.oim.queue_size);
  e.oim.temperature = cfg.get_double("oim.tau", e.oim.temperature);
  e.oim.lut_momentum = cfg.get_double("oim.momentum", e.oim.lut_momentum);
  e.lambda_explicit = cfg.has("oim.lambda");
  e.oim.lambda = cfg.get_double("oim.lambda", e.oim.lambda);
  e.oim.freeze_queue = cfg.get_bool("oim.freeze_queue", e.oim.freeze_queue);

  e.kd_mode = kd_mode_from_name(cfg.get_string("kd.mode", "none"));
  e.kd.mu = cfg.get_double("kd.mu", e.kd.mu);
  e.kd.gamma = cfg.get_double("kd.gamma", e.kd.gamma);
  e.kd.lambda_hint = cfg.get_double("kd.lambda_hint", e.kd.lambda_hint);
  e.kd.temperature = cfg.get_double("kd.temperature", e.kd.temperature);
  e.kd.margin = cfg.get_double("kd.margin", e.kd.margin);
  e.kd.hint_mean = cfg.get_bool("kd.hint_mean", e.kd.hint_mean);
  e.detector_teacher = cfg.get_string("kd.detector_teacher", "");
  e.lut_teacher = cfg.get_string("kd.lut_teacher", "");

  e.optim.steps = cfg.get_int("train.steps", e.optim.steps);
  e.optim.batch = cfg.get_int("train.batch", e.optim.batch);
  e.optim.lr = cfg.get_double("train.lr", e.optim.lr);
  e.optim.momentum = cfg.get_double("train.momentum", e.optim.momentum);
  e.optim.warmup_steps = cfg.get_int("train.warmup", e.optim.warmup_steps);
  e.optim.decay_fraction = cfg.get_double("train.decay_at", e.optim.decay_fraction);
  e.optim.decay_factor = cfg.get_double("train.decay_factor", e.optim.decay_factor);
  e.log_every = cfg.get_int("train.log_every", e.log_every);

  e.detect.score_min = cfg.get_double("eval.score_min", e.detect.score_min);
  e.detect.nms_iou = cfg.get_double("eval.nms_iou", e.detect.nms_iou);
  e.detect.max_detections = cfg.get_int("eval.max_detections", e.detect.max_detections);
  e.detect.top_k_proposals = cfg.get_int("eval.proposals", e.detect.top_k_proposals);

  cfg.fail_on_unused();

  if (e.optim.steps <= 0 || e.optim.batch <= 0) fail("train.steps and train.batch must be positive");
  if (e.oim.lambda < 0) fail("oim.lambda must be nonnegative");
  return e;
}

ExperimentConfig ExperimentConfig::load(const std::string& path,
                                        const std::vector<std::string>& overrides) {
  Config cfg = Config::from_file(path);
  for (const auto& o : overrides) cfg.set_pair(o);
  return from_config(cfg);
}

uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open for checksum: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes.data(), bytes.size());
}

double median(std::vector<double> values) {
  if (values.empty()) fail("median of empty list");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

Tensor scene_image(const Scene& s) {
  return Tensor::leaf({s.channels, s.height, s.width}, s.image);
}

std::vector<GtBox> scene_gt_boxes(const Scene& s) {
  std::vector<GtBox> out;
  out.reserve(s.persons.size());
  for (const auto& p : s.persons) out.push_back({p.box, p.id_label});
  return out;
}

SceneGt scene_eval_gt(const Scene& s) {
  SceneGt gt;
  for (const auto& p : s.persons) {
    gt.boxes.push_back(p.box);
    gt.ids.push_back(p.id_label);
  }
  return gt;
}

Tensor average_terms(std::vector<Tensor> terms) {
  if (terms.empty()) return Tensor::scalar(0.0);
  Tensor acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

MetricsReport evaluate_split(const PersonSearchModel& model, const DatasetSplit& data,
                             const DetectConfig& detect_cfg) {
  if (data.gallery.empty()) fail("evaluation requires at least one gallery scene");
  std::vector<std::vector<Detection>> detections;
  std::vector<SceneGt> gt;
  detections.reserve(data.gallery.size());
  for (const auto& scene : data.gallery) {
    detections.push_back(detect(model, scene_image(scene), detect_cfg));
    gt.push_back(scene_eval_gt(scene));
  }

  MetricsReport report;
  report.detection = detection_ap_recall(detections, gt, 0.5);

  if (!data.queries.empty()) {
    std::map<int, PersonSearchModel::Features> feature_cache;
    std::vector<SearchQuery> queries;
    queries.reserve(data.queries.size());
    for (const auto& q : data.queries) {
      if (q.scene_index < 0 || q.scene_index >= static_cast<int>(data.gallery.size()))
        fail("query references gallery scene " + std::to_string(q.scene_index) +
             " outside the split");
      auto it = feature_cache.find(q.scene_index);
      if (it == feature_cache.end()) {
        auto f = model.backbone_forward(
            scene_image(data.gallery[static_cast<size_t>(q.scene_index)]));
        it = feature_cache.emplace(q.scene_index, std::move(f)).first;
      }
      SearchQuery sq;
      sq.identity = q.identity;
      sq.embedding = model.idnet_forward(it->second, q.box).value();
      sq.gallery = q.gallery;
      queries.push_back(std::move(sq));
    }
    report.search = search_map_cmc(queries, detections, gt, 0.5, 1);
  }
  return report;
}

struct TeacherState {
  RestoredModel restored;
  uint64_t file_checksum = 0;
  std::string path;
};

}  // namespace

MetricsReport evaluate_checkpoint(const std::string& checkpoint_path, const DatasetSplit& data,
                                  const DetectConfig& detect_cfg, const std::string& out_dir) {
  RestoredModel restored = restore(read_checkpoint(checkpoint_path), /*trainable=*/false);
  MetricsReport report = evaluate_split(restored.model, data, detect_cfg);
  fs::create_directories(out_dir);
  write_metrics_csv(report, (fs::path(out_dir) / "metrics.csv").string());
  write_per_query_csv(report, (fs::path(out_dir) / "per_query.csv").string());
  return report;
}

RunResult train(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const DatasetSplit data =
      cfg.dataset_file.empty() ? generate_dataset(cfg.data) : read_dataset(cfg.dataset_file);
  if (data.height != data.width) fail("train: only square images are supported");

  OimConfig oim_cfg = cfg.oim;
  oim_cfg.embed_dim = cfg.embed_dim;
  oim_cfg.num_ids = data.num_ids;

  Rng root(cfg.seed);
  Rng init_rng = root.stream("init");
  ModelConfig mcfg = ModelConfig::make(cfg.backbone, data.channels, data.height, cfg.embed_dim);
  PersonSearchModel model(mcfg, &init_rng);

  const bool use_reid = cfg.kd_mode == KdMode::kReid || cfg.kd_mode == KdMode::kBoth;
  const bool use_det = cfg.kd_mode == KdMode::kDetector || cfg.kd_mode == KdMode::kBoth;

  RunResult result;

  LookupTable lut;
  if (use_reid) {
    if (cfg.lut_teacher.empty()) fail("kd mode '" + kd_mode_name(cfg.kd_mode) +
                                      "' requires kd.lut_teacher");
    auto attach = kd_reid_attach(cfg.lut_teacher, cfg.embed_dim, data.num_ids,
                                 cfg.lambda_explicit ? std::optional<double>(cfg.oim.lambda)
                                                     : std::nullopt);
    lut = std::move(attach.lut);
    oim_cfg.lambda = attach.lambda_oim;
  } else {
    Rng lut_rng = root.stream("lut");
    lut = LookupTable::random(cfg.embed_dim, data.num_ids, lut_rng);
  }
  UnlabeledQueue queue(cfg.embed_dim, oim_cfg.queue_size);
  result.lambda_oim_effective = oim_cfg.lambda;
  result.lut_checksum_start = lut.checksum();

  std::optional<TeacherState> teacher;
  std::optional<AdaptationLayer> adapter;
  if (use_det) {
    if (cfg.detector_teacher.empty()) fail("kd mode '" + kd_mode_name(cfg.kd_mode) +
                                           "' requires kd.detector_teacher");
    TeacherState t{restore(read_checkpoint(cfg.detector_teacher), /*trainable=*/false),
                   file_checksum(cfg.detector_teacher), cfg.detector_teacher};
    const ModelConfig& tc = t.restored.model.config();
    if (tc.image_size != mcfg.image_size || tc.image_channels != mcfg.image_channels)
      fail("detector teacher image geometry does not match the student");
    teacher = std::move(t);
    Rng adapt_rng = root.stream("adapt");
    adapter = AdaptationLayer::init(mcfg.backbone.out_channels(),
                                    teacher->restored.model.config().backbone.out_channels(),
                                    adapt_rng);
  }
  uint64_t lut_file_checksum = cfg.lut_teacher.empty() ? 0 : file_checksum(cfg.lut_teacher);

  std::vector<Tensor> params = model.parameters();
  if (adapter) {
    params.push_back(adapter->weight);
    params.push_back(adapter->bias);
  }
  Sgd opt(params, cfg.optim.lr, cfg.optim.momentum);

  Rng order_rng = root.stream("order");
  Rng sample_rng = root.stream("sample");

  const bool use_oim = oim_cfg.lambda > 0;
  const SampleConfig sample_cfg;
  const int decay_step = static_cast<int>(cfg.optim.decay_fraction * cfg.optim.steps);

  std::string loss_log = "step,lr,rpn_cls,rpn_reg,rcn_cls,rcn_reg,oim,hint,total\n";

  for (int step = 0; step < cfg.optim.steps; ++step) {
    double lr = step >= decay_step ? cfg.optim.lr * cfg.optim.decay_factor : cfg.optim.lr;
    if (cfg.optim.warmup_steps > 0 && step < cfg.optim.warmup_steps)
      lr = cfg.optim.lr * (step + 1) / cfg.optim.warmup_steps;
    opt.set_lr(lr);

    std::vector<Tensor> rpn_cls_terms, rpn_reg_terms, rcn_cls_terms, rcn_reg_terms, hint_terms;
    std::vector<Tensor> batch_embeddings;
    std::vector<int> batch_labels;

    for (int b = 0; b < cfg.optim.batch; ++b) {
      const Scene& scene =
          data.train[static_cast<size_t>(order_rng.uniform_int(0, static_cast<int>(data.train.size()) - 1))];
      const Tensor image = scene_image(scene);
      const std::vector<GtBox> gts = scene_gt_boxes(scene);

      PersonSearchModel::Features features = model.backbone_forward(image);
      RpnOutputs rpn = model.rpn_forward(features);
      HeadSample rpn_sample = sample_for_training(model.anchors(), gts, sample_rng, sample_cfg);

      std::vector<Proposal> proposals = model.propose(rpn, mcfg.proposals_per_image);
      std::vector<Box> candidates;
      candidates.reserve(proposals.size() + gts.size());
      for (const auto& p : proposals) candidates.push_back(p.box);
      for (const auto& g : gts) candidates.push_back(g.box);  // stabilizes early training
      HeadSample rcn_sample = sample_for_training(candidates, gts, sample_rng, sample_cfg);

      std::vector<Box> sampled_boxes;
      sampled_boxes.reserve(rcn_sample.indices.size());
      for (int idx : rcn_sample.indices)
        sampled_boxes.push_back(candidates[static_cast<size_t>(idx)]);
      RoiOutputs roi = model.roi_forward(features, sampled_boxes, use_oim);

      DetGtLosses gt_losses = detector_gt_losses(rpn, rpn_sample, roi, rcn_sample);

      if (use_oim) {
        for (size_t i = 0; i < rcn_sample.pos_rows.size(); ++i) {
          batch_embeddings.push_back(roi.embeddings[static_cast<size_t>(rcn_sample.pos_rows[i])]);
          batch_labels.push_back(gts[static_cast<size_t>(rcn_sample.pos_gt[i])].id_label);
        }
      }

      if (teacher) {
        const PersonSearchModel& tm = teacher->restored.model;
        PersonSearchModel::Features teacher_features = tm.backbone_forward(image);
        hint_terms.push_back(
            hint_loss(features.base, teacher_features.base, *adapter, cfg.kd.hint_mean));

        RpnOutputs teacher_rpn = tm.rpn_forward(teacher_features);
        Tensor rpn_soft = Tensor::scalar(0.0);
        Tensor rpn_bounded = Tensor::scalar(0.0);
        if (!rpn_sample.indices.empty()) {
          rpn_soft = soft_cls_loss(take_rows(rpn.cls_rows, rpn_sample.indices),
                                   take_rows(teacher_rpn.cls_rows, rpn_sample.indices),
                                   cfg.kd.temperature);
          if (!rpn_sample.pos_rows.empty()) {
            std::vector<int> pos_anchor_indices;
            std::vector<std::array<double, 4>> teacher_deltas;
            for (int row : rpn_sample.pos_rows) {
              const int anchor = rpn_sample.indices[static_cast<size_t>(row)];
              pos_anchor_indices.push_back(anchor);
              const double* d = teacher_rpn.reg_rows.value().data() + 4 * static_cast<size_t>(anchor);
              teacher_deltas.push_back({d[0], d[1], d[2], d[3]});
            }
            rpn_bounded = bounded_reg_loss(take_rows(rpn.reg_rows, pos_anchor_indices),
                                           teacher_deltas, rpn_sample.reg_targets, cfg.kd.margin);
          }
        }

        Tensor rcn_soft = Tensor::scalar(0.0);
        Tensor rcn_bounded = Tensor::scalar(0.0);
        if (!rcn_sample.indices.empty()) {
          RoiOutputs teacher_roi = tm.roi_forward(teacher_features, sampled_boxes, false);
          rcn_soft = soft_cls_loss(roi.cls_rows, teacher_roi.cls_rows, cfg.kd.temperature);
          if (!rcn_sample.pos_rows.empty()) {
            std::vector<std::array<double, 4>> teacher_deltas;
            for (int row : rcn_sample.pos_rows) {
              const double* d = teacher_roi.reg_rows.value().data() + 4 * static_cast<size_t>(row);
              teacher_deltas.push_back({d[0], d[1], d[2], d[3]});
            }
            rcn_bounded = bounded_reg_loss(take_rows(roi.reg_rows, rcn_sample.pos_rows),
                                           teacher_deltas, rcn_sample.reg_targets, cfg.kd.margin);
          }
        }

        rpn_cls_terms.push_back(combined_cls_loss(gt_losses.rpn_cls, rpn_soft, cfg.kd.mu));
        rpn_reg_terms.push_back(combined_reg_loss(gt_losses.rpn_reg, rpn_bounded, cfg.kd.gamma));
        rcn_cls_terms.push_back(combined_cls_loss(gt_losses.rcn_cls, rcn_soft, cfg.kd.mu));
        rcn_reg_terms.push_back(combined_reg_loss(gt_losses.rcn_reg, rcn_bounded, cfg.kd.gamma));
      } else {
        rpn_cls_terms.push_back(gt_losses.rpn_cls);
        rpn_reg_terms.push_back(gt_losses.rpn_reg);
        rcn_cls_terms.push_back(gt_losses.rcn_cls);
        rcn_reg_terms.push_back(gt_losses.rcn_reg);
      }
    }

    ObjectiveTerms terms;
    terms.rpn_cls = average_terms(std::move(rpn_cls_terms));
    terms.rpn_reg = average_terms(std::move(rpn_reg_terms));
    terms.rcn_cls = average_terms(std::move(rcn_cls_terms));
    terms.rcn_reg = average_terms(std::move(rcn_reg_terms));
    if (teacher) {
      terms.hint = average_terms(std::move(hint_terms));
      terms.lambda_hint = cfg.kd.lambda_hint;
    }

    OimResult oim_result;
    if (use_oim) {
      for (const auto& e : batch_embeddings) {
        double n2 = 0;
        for (double v : e.value()) n2 += v * v;
        // overflow upstream shows up as non-finite values or as a zero vector
        // coming out of the normalizer
        if (!std::isfinite(n2) || std::abs(n2 - 1.0) > 1e-3)
          fail("training diverged: non-finite activations at step " + std::to_string(step));
      }
      oim_result = oim_forward(batch_embeddings, batch_labels, lut, queue, oim_cfg.temperature);
      terms.oim = oim_result.loss;
      terms.lambda_oim = oim_cfg.lambda;
      if (!batch_embeddings.empty() && oim_result.labeled_count == 0)
        ++result.all_unlabeled_batches;  // loss contributes nothing this step
    }

    Tensor total = total_objective(terms);
    if (!std::isfinite(total.item()))
      fail("training diverged: non-finite loss at step " + std::to_string(step));
    backward(total);
    try {
      opt.step();
    } catch (const std::exception& e) {
      fail("training diverged at step " + std::to_string(step) + ": " + e.what());
    }

    if (use_oim) {
      std::vector<std::vector<double>> values;
      values.reserve(batch_embeddings.size());
      for (const auto& e : batch_embeddings) values.push_back(e.value());
      OimUpdateStats stats =
          oim_update(values, batch_labels, lut, queue, oim_cfg.lut_momentum, oim_cfg.freeze_queue);
      result.labeled_samples_seen += static_cast<uint64_t>(stats.lut_writes + stats.lut_skipped);
    }

    if (step % cfg.log_every == 0 || step + 1 == cfg.optim.steps) {
      loss_log += std::to_string(step) + "," + fmt_short(opt.lr()) + "," +
                  fmt(terms.rpn_cls.item()) + "," + fmt(terms.rpn_reg.item()) + "," +
                  fmt(terms.rcn_cls.item()) + "," + fmt(terms.rcn_reg.item()) + "," +
                  fmt(terms.oim.defined() ? terms.oim.item() : 0.0) + "," +
                  fmt(terms.hint.defined() ? terms.hint.item() : 0.0) + "," +
                  fmt(total.item()) + "\n";
    }
  }

  result.lut_checksum_end = lut.checksum();
  result.lut_skipped_writes = lut.skipped_updates();
  if (use_reid) {
    if (result.lut_checksum_end != result.lut_checksum_start)
      fail("frozen lookup-table audit failed: checksum changed during training");
    if (result.lut_skipped_writes != result.labeled_samples_seen)
      fail("frozen lookup-table audit failed: skipped-write counter " +
           std::to_string(result.lut_skipped_writes) + " != labeled samples seen " +
           std::to_string(result.labeled_samples_seen));
  }
  if (teacher && file_checksum(teacher->path) != teacher->file_checksum)
    fail("teacher immutability audit failed: " + teacher->path + " changed during the run");
  if (!cfg.lut_teacher.empty() && file_checksum(cfg.lut_teacher) != lut_file_checksum)
    fail("teacher immutability audit failed: " + cfg.lut_teacher + " changed during the run");

  result.metrics = evaluate_split(model, data, cfg.detect);

  const fs::path out(cfg.out_dir);
  result.metrics_path = (out / "metrics.csv").string();
  write_metrics_csv(result.metrics, result.metrics_path);
  write_per_query_csv(result.metrics, (out / "per_query.csv").string());
  {
    std::ofstream log(out / "loss_log.csv", std::ios::trunc);
    log << loss_log;
  }

  Checkpoint ck = snapshot(model, oim_cfg, lut, queue, static_cast<uint64_t>(cfg.optim.steps));
  if (adapter)
    for (const auto& [name, t] : adapter->named_parameters()) ck.params.emplace_back(name, t.detach());
  result.checkpoint_path = (out / "checkpoint.psck").string();
  write_checkpoint(ck, result.checkpoint_path);
  return result;
}

void run_parallel(std::vector<std::function<void()>> work, int jobs) {
  if (jobs <= 1) {
    for (auto& w : work) w();
    return;
  }
  std::atomic<size_t> next{0};
  std::mutex mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= work.size()) return;
      try {
        work[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  const int n = std::min<int>(jobs, static_cast<int>(work.size()));
  threads.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

SweepResult lambda_sweep(const ExperimentConfig& base, const std::vector<double>& lambdas,
                         const std::vector<uint64_t>& seeds, int jobs) {
  if (lambdas.empty()) fail("lambda_sweep: empty lambda list");
  if (seeds.empty()) fail("lambda_sweep: empty seed list");
  SweepResult sweep;
  sweep.lambdas = lambdas;
  sweep.rows.resize(lambdas.size() * seeds.size());

  std::vector<std::function<void()>> work;
  for (size_t li = 0; li < lambdas.size(); ++li) {
    for (size_t si = 0; si < seeds.size(); ++si) {
      const size_t slot = li * seeds.size() + si;
      work.push_back([&, li, si, slot] {
        ExperimentConfig cfg = base;
        cfg.oim.lambda = lambdas[li];
        cfg.lambda_explicit = true;
        cfg.seed = seeds[si];
        cfg.out_dir = (fs::path(base.out_dir) / "runs" /
                       ("lambda_" + fmt_short(lambdas[li]) + "_seed_" + std::to_string(seeds[si])))
                          .string();
        RunResult r = train(cfg);
        sweep.rows[slot] = SweepRow{lambdas[li], seeds[si], r.metrics};
      });
    }
  }
  run_parallel(std::move(work), jobs);
  write_sweep_csv(sweep, base.out_dir);
  return sweep;
}

void write_sweep_csv(const SweepResult& sweep, const std::string& dir) {
  fs::create_directories(dir);
  std::string rows = "lambda_oim,seed,search_map,cmc_top1,det_map,det_recall\n";
  for (const auto& r : sweep.rows)
    rows += fmt_short(r.lambda) + "," + std::to_string(r.seed) + "," + fmt(r.metrics.search.map) +
            "," + fmt(r.metrics.search.top_k_rate) + "," + fmt(r.metrics.detection.ap) + "," +
            fmt(r.metrics.detection.recall) + "\n";
  std::ofstream(fs::path(dir) / "sweep.csv", std::ios::trunc) << rows;

  std::string curves = "lambda_oim,det_map_median,search_map_median,det_recall_median,cmc_top1_median\n";
  for (double l : sweep.lambdas) {
    std::vector<double> det, search, recall, top1;
    for (const auto& r : sweep.rows)
      if (r.lambda == l) {
        det.push_back(r.metrics.detection.ap);
        search.push_back(r.metrics.search.map);
        recall.push_back(r.metrics.detection.recall);
        top1.push_back(r.metrics.search.top_k_rate);
      }
    curves += fmt_short(l) + "," + fmt(median(det)) + "," + fmt(median(search)) + "," +
              fmt(median(recall)) + "," + fmt(median(top1)) + "\n";
  }
  std::ofstream(fs::path(dir) / "sweep_curves.csv", std::ios::trunc) << curves;
}

TeacherPaths prepare_teachers(const ExperimentConfig& base, const std::string& dir, int jobs) {
  const fs::path tdir = fs::path(dir) / "teachers";
  fs::create_directories(tdir);
  TeacherPaths out;
  out.detector = (tdir / "detector.psck").string();
  out.joint_lut = (tdir / "joint.pslut").string();
  out.weak_lut = (tdir / "joint_small.pslut").string();
  out.strong_lut = (tdir / "joint_long.pslut").string();

  struct Spec {
    std::string name;
    BackboneSize backbone;
    double lambda;
    int steps_scale;
    std::string lut_out;  // empty: detector teacher, no table export
  };
  const std::vector<Spec> specs = {
      {"detector", base.backbone, 0.0, 1, ""},
      {"joint", base.backbone, 1.0, 1, out.joint_lut},
      {"joint_small", BackboneSize::kSmall, 1.0, 1, out.weak_lut},
      {"joint_long", base.backbone, 1.0, 2, out.strong_lut},
  };

  std::vector<std::function<void()>> work;
  for (size_t i = 0; i < specs.size(); ++i) {
    const Spec& s = specs[i];
    const fs::path ckpt = tdir / (s.name + ".psck");
    const bool have_ckpt = fs::exists(ckpt);
    const bool have_lut = s.lut_out.empty() || fs::exists(s.lut_out);
    if (have_ckpt && have_lut) continue;
    work.push_back([&base, &tdir, s, ckpt, i] {
      ExperimentConfig cfg = base;
      cfg.kd_mode = KdMode::kNone;
      cfg.detector_teacher.clear();
      cfg.lut_teacher.clear();
      cfg.backbone = s.backbone;
      cfg.oim.lambda = s.lambda;
      cfg.lambda_explicit = true;
      cfg.optim.steps = base.optim.steps * s.steps_scale;
      cfg.seed = base.seed + 900 + static_cast<uint64_t>(i);
      cfg.out_dir = (fs::path(tdir) / (s.name + "_run")).string();
      RunResult r = train(cfg);
      fs::copy_file(r.checkpoint_path, ckpt, fs::copy_options::overwrite_existing);
      if (!s.lut_out.empty()) {
        Checkpoint loaded = read_checkpoint(ckpt.string());
        write_lut(loaded.lut, s.lut_out);
      }
    });
  }
  run_parallel(std::move(work), jobs);
  return out;
}

AblationResult run_ablation_suite(const ExperimentConfig& base, const std::vector<uint64_t>& seeds,
                                  const TeacherPaths& teachers, int jobs) {
  if (seeds.empty()) fail("run_ablation_suite: empty seed list");
  struct RowSpec {
    std::string name;
    KdMode mode;
    double lambda;        // < 0: leave to the mode default
    std::string det_teacher;
    std::string lut_teacher;
  };
  const std::string det = teachers.detector;
  const std::vector<RowSpec> rows = {
      {"baseline", KdMode::kNone, 1.0, "", ""},
      {"kd_det", KdMode::kDetector, 1.0, det, ""},
      {"kd_det_low", KdMode::kDetector, 0.3, det, ""},
      {"kd_reid", KdMode::kReid, -1, "", teachers.joint_lut},
      {"kd_det_reid", KdMode::kBoth, -1, det, teachers.joint_lut},
      {"kd_reid_weak", KdMode::kReid, -1, "", teachers.weak_lut},
      {"kd_reid_strong", KdMode::kReid, -1, "", teachers.strong_lut},
  };

  AblationResult result;
  result.rows.resize(rows.size() * seeds.size());
  std::vector<std::function<void()>> work;
  for (size_t ri = 0; ri < rows.size(); ++ri) {
    const RowSpec& spec = rows[ri];
    bool missing = false;
    std::string missing_path;
    for (const std::string& path : {spec.det_teacher, spec.lut_teacher})
      if (!path.empty() && !fs::exists(path)) {
        missing = true;
        missing_path = path;
      }
    for (size_t si = 0; si < seeds.size(); ++si) {
      const size_t slot = ri * seeds.size() + si;
      AblationRow& row = result.rows[slot];
      row.name = spec.name;
      row.mode = spec.mode;
      row.lambda = spec.lambda;
      row.teacher = spec.det_teacher.empty() ? spec.lut_teacher : spec.det_teacher;
      row.seed = seeds[si];
      if (missing) {
        row.skipped = true;
        std::fprintf(stderr, "ablation row '%s' skipped: missing teacher %s\n", spec.name.c_str(),
                     missing_path.c_str());
        continue;
      }
      work.push_back([&, spec, si, slot] {
        ExperimentConfig cfg = base;
        cfg.kd_mode = spec.mode;
        cfg.detector_teacher = spec.det_teacher;
        cfg.lut_teacher = spec.lut_teacher;
        if (spec.lambda >= 0) {
          cfg.oim.lambda = spec.lambda;
          cfg.lambda_explicit = true;
        } else {
          cfg.lambda_explicit = false;
        }
        cfg.seed = seeds[si];
        cfg.out_dir = (fs::path(base.out_dir) / "rows" /
                       (spec.name + "_seed_" + std::to_string(seeds[si])))
                          .string();
        RunResult r = train(cfg);
        result.rows[slot].lambda = r.lambda_oim_effective;
        result.rows[slot].metrics = r.metrics;
      });
    }
  }
  run_parallel(std::move(work), jobs);
  write_ablation_csv(result, base.out_dir);
  return result;
}

void write_ablation_csv(const AblationResult& ablation, const std::string& dir) {
  fs::create_directories(dir);
  std::string rows = "row,lambda_oim,kd_mode,teacher,seed,search_map,cmc_top1,det_map,det_recall,skipped\n";
  for (const auto& r : ablation.rows) {
    rows += r.name + "," + fmt_short(r.lambda) + "," + kd_mode_name(r.mode) + "," + r.teacher +
            "," + std::to_string(r.seed) + ",";
    if (r.skipped) {
      rows += ",,,,1\n";
    } else {
      rows += fmt(r.metrics.search.map) + "," + fmt(r.metrics.search.top_k_rate) + "," +
              fmt(r.metrics.detection.ap) + "," + fmt(r.metrics.detection.recall) + ",0\n";
    }
  }
  std::ofstream(fs::path(dir) / "ablation.csv", std::ios::trunc) << rows;

  std::string med = "row,search_map_median,cmc_top1_median,det_map_median,det_recall_median\n";
  std::vector<std::string> seen;
  for (const auto& r : ablation.rows) {
    if (r.skipped) continue;
    if (std::find(seen.begin(), seen.end(), r.name) != seen.end()) continue;
    seen.push_back(r.name);
    std::vector<double> s, t, d, rc;
    for (const auto& o : ablation.rows)
      if (!o.skipped && o.name == r.name) {
        s.push_back(o.metrics.search.map);
        t.push_back(o.metrics.search.top_k_rate);
        d.push_back(o.metrics.detection.ap);
        rc.push_back(o.metrics.detection.recall);
      }
    med += r.name + "," + fmt(median(s)) + "," + fmt(median(t)) + "," + fmt(median(d)) + "," +
           fmt(median(rc)) + "\n";
  }
  std::ofstream(fs::path(dir) / "ablation_medians.csv", std::ios::trunc) << med;
}

}  // namespace pskd
