#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "pskd/common.hpp"
#include "pskd/rng.hpp"
#include "pskd/tensor.hpp"

namespace pskd {

enum class BackboneSize { kLarge, kSmall };

std::string backbone_size_name(BackboneSize s);
BackboneSize backbone_size_from_name(const std::string& name);

/// Four conv stages; the first three run at stride 2, the last at stride 1,
/// so the feature map is 1/8 of the input resolution for either size.
struct BackboneSpec {
  BackboneSize size = BackboneSize::kLarge;
  std::array<int, 4> widths{8, 16, 24, 24};

  static BackboneSpec make(BackboneSize size);
  int out_channels() const { return widths[3]; }
  static constexpr int kStride = 8;
};

struct ModelConfig {
  BackboneSpec backbone;
  int image_channels = 1;
  int image_size = 96;
  int embed_dim = 32;
  int pooled_size = 6;
  int rcn_hidden = 96;
  int id_hidden = 64;
  double anchor_area = 512.0;
  std::array<double, 2> anchor_aspects{0.42, 0.58};  // width / height
  int proposals_per_image = 32;
  double rpn_nms_iou = 0.7;

  static ModelConfig make(BackboneSize size, int image_channels = 1, int image_size = 96,
                          int embed_dim = 32);
  int num_anchor_shapes() const { return static_cast<int>(anchor_aspects.size()); }
};

struct Proposal {
  Box box;
  double score = 0;
  int anchor_index = 0;
};

struct GtBox {
  Box box;
  int id_label = kUnlabeled;
};

struct RpnOutputs {
  Tensor cls_rows;  // [num_anchors, 2] logits (background, person)
  Tensor reg_rows;  // [num_anchors, 4] box deltas
};

struct RoiOutputs {
  Tensor cls_rows;                  // [n, 2]
  Tensor reg_rows;                  // [n, 4]
  std::vector<Tensor> embeddings;   // n unit-norm [embed_dim] (when requested)
};

/// Standard box-delta parameterization between a source and a target box.
std::array<double, 4> box_deltas(const Box& src, const Box& dst);
Box apply_deltas(const Box& src, const double* deltas);

/// Greedy non-maximum suppression. Returns indices of kept boxes, ordered by
/// descending score with ascending-index tie break, at most max_keep of them.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh, int max_keep);

// Toy two-stage person search network: a small conv backbone, a proposal
// head over precomputed anchors, a region classification head, and an
// identity embedding head sharing the region trunk.
class PersonSearchModel {
 public:
  /// rng == nullptr gives zero weights (used when loading a checkpoint);
  /// trainable == false builds constant parameters that record no graph.
  PersonSearchModel(const ModelConfig& cfg, Rng* rng, bool trainable = true);

  const ModelConfig& config() const { return cfg_; }

  /// base: detector feature map (feeds the proposal and region heads and is
  /// the distillation tap); mid: shared texture features at the same stride,
  /// consumed by the identity branch.
  struct Features {
    Tensor base;
    Tensor mid;
  };
  Features backbone_forward(const Tensor& image) const;
  RpnOutputs rpn_forward(const Features& features) const;
  /// Scored, NMS-filtered, clipped proposals in image coordinates.
  /// dropped_degenerate, when given, counts zero-area boxes removed.
  std::vector<Proposal> propose(const RpnOutputs& rpn, int top_k,
                                int* dropped_degenerate = nullptr) const;
  RoiOutputs roi_forward(const Features& features, const std::vector<Box>& boxes,
                         bool with_embeddings) const;
  Tensor idnet_forward(const Features& features, const Box& box) const;

  const std::vector<Box>& anchors() const { return anchors_; }
  int feature_size() const { return cfg_.image_size / BackboneSpec::kStride; }

  std::vector<Tensor> parameters() const;
  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }
  void load_values(const std::vector<std::pair<std::string, Tensor>>& named);
  int64_t parameter_count() const;
  int64_t backbone_parameter_count() const;

 private:
  Tensor param(const std::string& name) const;
  Tensor fc(const Tensor& x, const std::string& w, const std::string& b) const;

  ModelConfig cfg_;
  bool trainable_ = true;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Box> anchors_;
};

// ---- ground-truth matching, sampling and detector losses ----

struct SampleConfig {
  double pos_iou = 0.5;
  double neg_iou = 0.3;
  int total = 16;
  int max_pos = 8;
};

/// Per-candidate assignment: gt index for positives, -1 negative, -2 ignored.
std::vector<int> match_boxes(const std::vector<Box>& candidates, const std::vector<GtBox>& gt,
                             double pos_iou, double neg_iou);

struct HeadSample {
  std::vector<int> indices;                       // sampled candidate indices
  std::vector<int> labels;                        // 1 person / 0 background per sample
  std::vector<int> pos_rows;                      // positions within `indices` that are positive
  std::vector<int> pos_gt;                        // matched gt per positive
  std::vector<std::array<double, 4>> reg_targets; // per positive
};

HeadSample sample_for_training(const std::vector<Box>& candidates, const std::vector<GtBox>& gt,
                               Rng& rng, const SampleConfig& cfg);

struct HeadLosses {
  Tensor cls;
  Tensor reg;
};

/// cls_rows/reg_rows must be aligned with sample.indices (one row per sample).
/// Classification is mean cross entropy; regression is smooth-L1 summed over
/// the four coordinates and averaged over positives (zero if none).
HeadLosses head_losses(const Tensor& cls_rows, const Tensor& reg_rows, const HeadSample& sample);

struct DetGtLosses {
  Tensor rpn_cls, rpn_reg, rcn_cls, rcn_reg;
};

/// Convenience wrapper: matches, samples and evaluates both heads for one
/// scene. rpn rows cover all anchors; the RCN rows are computed by the caller
/// on sample boxes obtained from `rcn_sample`.
DetGtLosses detector_gt_losses(const RpnOutputs& rpn, const HeadSample& rpn_sample,
                               const RoiOutputs& rcn, const HeadSample& rcn_sample);

// ---- eval-time detection ----

struct Detection {
  Box box;
  double score = 0;
  std::vector<double> embedding;
};

struct DetectConfig {
  int top_k_proposals = 32;
  double score_min = 0.05;
  double nms_iou = 0.5;
  int max_detections = 16;
};

std::vector<Detection> detect(const PersonSearchModel& model, const Tensor& image,
                              const DetectConfig& cfg);

}  // namespace pskd
