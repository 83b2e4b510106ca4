#include "pskd/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace pskd {

double average_precision(const std::vector<bool>& ranked_hits, int num_positives) {
  if (num_positives <= 0) fail("average_precision: no positives");
  std::vector<double> precision, recall;
  int tp = 0;
  for (size_t i = 0; i < ranked_hits.size(); ++i) {
    if (ranked_hits[i]) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / num_positives);
  }
  // Right-to-left precision envelope, integrated over recall steps.
  double ap = 0, best = 0, prev_recall = 0;
  std::vector<double> envelope(precision.size());
  for (size_t i = precision.size(); i-- > 0;) {
    best = std::max(best, precision[i]);
    envelope[i] = best;
  }
  for (size_t i = 0; i < precision.size(); ++i) {
    if (recall[i] > prev_recall) {
      ap += (recall[i] - prev_recall) * envelope[i];
      prev_recall = recall[i];
    }
  }
  return ap;
}

DetectionEval detection_ap_recall(const std::vector<std::vector<Detection>>& detections,
                                  const std::vector<SceneGt>& gt, double iou_thresh) {
  if (detections.size() != gt.size())
    fail("detection_ap_recall: detections and ground truth must cover the same scenes");
  int total_gt = 0;
  for (const auto& g : gt) total_gt += static_cast<int>(g.boxes.size());
  DetectionEval out;
  if (total_gt == 0) return out;  // undefined, reported as absent
  out.defined = true;

  struct Ranked {
    double score;
    int scene;
    int index;
  };
  std::vector<Ranked> ranked;
  for (size_t s = 0; s < detections.size(); ++s)
    for (size_t i = 0; i < detections[s].size(); ++i)
      ranked.push_back({detections[s][i].score, static_cast<int>(s), static_cast<int>(i)});
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene != b.scene) return a.scene < b.scene;
    return a.index < b.index;
  });

  std::vector<std::vector<bool>> matched(gt.size());
  for (size_t s = 0; s < gt.size(); ++s) matched[s].assign(gt[s].boxes.size(), false);

  std::vector<bool> hits;
  hits.reserve(ranked.size());
  int tp = 0;
  for (const auto& r : ranked) {
    const auto& det = detections[static_cast<size_t>(r.scene)][static_cast<size_t>(r.index)];
    const auto& boxes = gt[static_cast<size_t>(r.scene)].boxes;
    double best = 0;
    int best_g = -1;
    for (size_t g = 0; g < boxes.size(); ++g) {
      if (matched[static_cast<size_t>(r.scene)][g]) continue;
      const double v = iou(det.box, boxes[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    const bool hit = best >= iou_thresh && best_g >= 0;
    if (hit) {
      matched[static_cast<size_t>(r.scene)][static_cast<size_t>(best_g)] = true;
      ++tp;
    }
    hits.push_back(hit);
  }
  out.ap = hits.empty() ? 0.0 : average_precision(hits, total_gt);
  out.recall = static_cast<double>(tp) / total_gt;
  return out;
}

SearchEval search_map_cmc(const std::vector<SearchQuery>& queries,
                          const std::vector<std::vector<Detection>>& scene_detections,
                          const std::vector<SceneGt>& scene_gt, double iou_thresh, int top_k) {
  if (scene_detections.size() != scene_gt.size())
    fail("search_map_cmc: detections and ground truth must cover the same scenes");
  if (queries.empty()) fail("search_map_cmc: no queries");
  if (top_k < 1) fail("search_map_cmc: top_k must be >= 1");

  SearchEval out;
  for (size_t qi = 0; qi < queries.size(); ++qi) {
    const auto& q = queries[qi];
    if (q.gallery.empty()) fail("search_map_cmc: query " + std::to_string(qi) + " has empty gallery");

    int num_pos = 0;
    for (int s : q.gallery) {
      if (s < 0 || s >= static_cast<int>(scene_gt.size()))
        fail("search_map_cmc: gallery scene index " + std::to_string(s) + " out of range");
      const auto& g = scene_gt[static_cast<size_t>(s)];
      for (int id : g.ids)
        if (id == q.identity) ++num_pos;
    }
    if (num_pos == 0) {
      ++out.skipped;
      continue;
    }

    struct Ranked {
      double sim;
      int scene;
      int index;
    };
    std::vector<Ranked> ranked;
    for (int s : q.gallery) {
      const auto& dets = scene_detections[static_cast<size_t>(s)];
      for (size_t i = 0; i < dets.size(); ++i) {
        if (dets[i].embedding.size() != q.embedding.size())
          fail("search_map_cmc: embedding dimension mismatch");
        double sim = 0;
        for (size_t d = 0; d < q.embedding.size(); ++d)
          sim += q.embedding[d] * dets[i].embedding[d];
        ranked.push_back({sim, s, static_cast<int>(i)});
      }
    }
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      if (a.sim != b.sim) return a.sim > b.sim;
      if (a.scene != b.scene) return a.scene < b.scene;
      return a.index < b.index;
    });

    std::vector<std::vector<bool>> used(scene_gt.size());
    for (int s : q.gallery) used[static_cast<size_t>(s)].assign(scene_gt[static_cast<size_t>(s)].boxes.size(), false);

    std::vector<bool> hits;
    hits.reserve(ranked.size());
    for (const auto& r : ranked) {
      const auto& det = scene_detections[static_cast<size_t>(r.scene)][static_cast<size_t>(r.index)];
      const auto& g = scene_gt[static_cast<size_t>(r.scene)];
      double best = 0;
      int best_i = -1;
      for (size_t i = 0; i < g.boxes.size(); ++i) {
        if (g.ids[i] != q.identity || used[static_cast<size_t>(r.scene)][i]) continue;
        const double v = iou(det.box, g.boxes[i]);
        if (v > best) {
          best = v;
          best_i = static_cast<int>(i);
        }
      }
      const bool hit = best >= iou_thresh && best_i >= 0;
      if (hit) used[static_cast<size_t>(r.scene)][static_cast<size_t>(best_i)] = true;
      hits.push_back(hit);
    }

    const double ap = hits.empty() ? 0.0 : average_precision(hits, num_pos);
    bool in_top_k = false;
    for (int i = 0; i < top_k && i < static_cast<int>(hits.size()); ++i) in_top_k |= hits[static_cast<size_t>(i)];
    out.per_query_ap.push_back(ap);
    out.per_query_hit.push_back(in_top_k ? 1 : 0);
    out.per_query_id.push_back(q.identity);
    ++out.used;
  }

  if (out.used > 0) {
    double sum_ap = 0;
    int hits = 0;
    for (double ap : out.per_query_ap) sum_ap += ap;
    for (int h : out.per_query_hit) hits += h;
    out.map = sum_ap / out.used;
    out.top_k_rate = static_cast<double>(hits) / out.used;
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot open for writing: " + path);
  out << text;
  if (!out) fail("write failed: " + path);
}

}  // namespace

void write_metrics_csv(const MetricsReport& report, const std::string& path) {
  std::string text = "det_map,det_recall,search_map,cmc_top1,queries_used,queries_skipped\n";
  text += fmt(report.detection.ap) + "," + fmt(report.detection.recall) + "," +
          fmt(report.search.map) + "," + fmt(report.search.top_k_rate) + "," +
          std::to_string(report.search.used) + "," + std::to_string(report.search.skipped) + "\n";
  write_text(path, text);
}

void write_per_query_csv(const MetricsReport& report, const std::string& path) {
  std::string text = "query_index,identity,ap,hit_top1\n";
  for (size_t i = 0; i < report.search.per_query_ap.size(); ++i) {
    text += std::to_string(i) + "," + std::to_string(report.search.per_query_id[i]) + "," +
            fmt(report.search.per_query_ap[i]) + "," +
            std::to_string(report.search.per_query_hit[i]) + "\n";
  }
  write_text(path, text);
}

}  // namespace pskd
