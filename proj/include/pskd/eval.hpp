#pragma once

#include <string>
#include <vector>

#include "pskd/model.hpp"

namespace pskd {

struct SceneGt {
  std::vector<Box> boxes;
  std::vector<int> ids;  // aligned with boxes; kUnlabeled allowed
};

struct DetectionEval {
  bool defined = false;  // false when there is no ground truth at all
  double ap = 0;
  double recall = 0;
};

/// All-points interpolated average precision over detections pooled across
/// scenes, plus plain recall. Greedy matching in score order, each ground
/// truth matched at most once.
DetectionEval detection_ap_recall(const std::vector<std::vector<Detection>>& detections,
                                  const std::vector<SceneGt>& gt, double iou_thresh = 0.5);

struct SearchQuery {
  int identity = 0;
  std::vector<double> embedding;  // unit norm
  std::vector<int> gallery;       // scene indices to search
};

struct SearchEval {
  double map = 0;
  double top_k_rate = 0;  // fraction of queries with a true match in the top K
  int used = 0;
  int skipped = 0;  // queries whose identity has no ground truth in their gallery
  std::vector<double> per_query_ap;
  std::vector<int> per_query_hit;
  std::vector<int> per_query_id;
};

/// Ranks every gallery detection by cosine similarity to the query embedding;
/// a detection is a true match iff it overlaps (IoU >= iou_thresh) a
/// ground-truth box of the query identity. Ties break on (scene, index).
SearchEval search_map_cmc(const std::vector<SearchQuery>& queries,
                          const std::vector<std::vector<Detection>>& scene_detections,
                          const std::vector<SceneGt>& scene_gt, double iou_thresh = 0.5,
                          int top_k = 1);

struct MetricsReport {
  DetectionEval detection;
  SearchEval search;
};

/// One-row CSV: det_map,det_recall,search_map,cmc_top1,queries_used,queries_skipped
void write_metrics_csv(const MetricsReport& report, const std::string& path);
/// Per-query rows: query_index,identity,ap,hit_top1
void write_per_query_csv(const MetricsReport& report, const std::string& path);

/// Shared AP primitive: all-points interpolation over a ranked hit list.
double average_precision(const std::vector<bool>& ranked_hits, int num_positives);

}  // namespace pskd
