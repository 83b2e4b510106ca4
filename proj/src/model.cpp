#include "pskd/model.hpp"

#include <algorithm>
#include <cmath>

namespace pskd {

std::string backbone_size_name(BackboneSize s) {
  return s == BackboneSize::kLarge ? "large" : "small";
}

BackboneSize backbone_size_from_name(const std::string& name) {
  if (name == "large") return BackboneSize::kLarge;
  if (name == "small") return BackboneSize::kSmall;
  fail("unknown backbone size '" + name + "' (expected large|small)");
}

BackboneSpec BackboneSpec::make(BackboneSize size) {
  BackboneSpec spec;
  spec.size = size;
  if (size == BackboneSize::kLarge) {
    spec.widths = {8, 16, 24, 24};
  } else {
    spec.widths = {4, 8, 12, 12};
  }
  return spec;
}

ModelConfig ModelConfig::make(BackboneSize size, int image_channels, int image_size,
                              int embed_dim) {
  ModelConfig cfg;
  cfg.backbone = BackboneSpec::make(size);
  cfg.image_channels = image_channels;
  cfg.image_size = image_size;
  cfg.embed_dim = embed_dim;
  cfg.rcn_hidden = size == BackboneSize::kLarge ? 96 : 48;
  cfg.id_hidden = size == BackboneSize::kLarge ? 64 : 32;
  return cfg;
}

std::array<double, 4> box_deltas(const Box& src, const Box& dst) {
  const double sw = std::max(src.width(), 1e-6), sh = std::max(src.height(), 1e-6);
  return {
      (dst.cx() - src.cx()) / sw,
      (dst.cy() - src.cy()) / sh,
      std::log(std::max(dst.width(), 1e-6) / sw),
      std::log(std::max(dst.height(), 1e-6) / sh),
  };
}

Box apply_deltas(const Box& src, const double* d) {
  const double sw = std::max(src.width(), 1e-6), sh = std::max(src.height(), 1e-6);
  const double cx = src.cx() + std::clamp(d[0], -4.0, 4.0) * sw;
  const double cy = src.cy() + std::clamp(d[1], -4.0, 4.0) * sh;
  const double w = sw * std::exp(std::clamp(d[2], -4.0, 4.0));
  const double h = sh * std::exp(std::clamp(d[3], -4.0, 4.0));
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh, int max_keep) {
  if (boxes.size() != scores.size()) fail("nms: boxes and scores must align");
  std::vector<int> order(boxes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
      return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
    return a < b;
  });
  std::vector<int> kept;
  for (int i : order) {
    if (static_cast<int>(kept.size()) >= max_keep) break;
    bool overlaps = false;
    for (int k : kept)
      if (iou(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(k)]) >= iou_thresh) {
        overlaps = true;
        break;
      }
    if (!overlaps) kept.push_back(i);
  }
  return kept;
}

namespace {

Tensor init_conv(const std::string&, int oc, int ic, int k, Rng* rng) {
  const int n = oc * ic * k * k;
  std::vector<Scalar> v(static_cast<size_t>(n), 0.0);
  if (rng) {
    const double std = std::sqrt(2.0 / (ic * k * k));
    for (auto& e : v) e = rng->normal(0, std);
  }
  return Tensor::leaf({oc, ic, k, k}, std::move(v));
}

Tensor init_fc(const std::string&, int out, int in, Rng* rng, double gain = 2.0) {
  std::vector<Scalar> v(static_cast<size_t>(out) * in, 0.0);
  if (rng) {
    const double std = std::sqrt(gain / in);
    for (auto& e : v) e = rng->normal(0, std);
  }
  return Tensor::leaf({out, in}, std::move(v));
}

}  // namespace

PersonSearchModel::PersonSearchModel(const ModelConfig& cfg, Rng* rng, bool trainable)
    : cfg_(cfg), trainable_(trainable) {
  const auto& w = cfg.backbone.widths;
  auto push = [this](const std::string& name, Tensor t) {
    params_.emplace_back(name, std::move(t));
  };

  push("backbone.conv1.w", init_conv("conv1", w[0], cfg.image_channels, 3, rng));
  push("backbone.conv1.b", Tensor::zeros({w[0]}));
  push("backbone.conv2.w", init_conv("conv2", w[1], w[0], 3, rng));
  push("backbone.conv2.b", Tensor::zeros({w[1]}));
  push("backbone.conv3.w", init_conv("conv3", w[2], w[1], 3, rng));
  push("backbone.conv3.b", Tensor::zeros({w[2]}));
  push("backbone.conv4.w", init_conv("conv4", w[3], w[2], 3, rng));
  push("backbone.conv4.b", Tensor::zeros({w[3]}));

  const int a = cfg.num_anchor_shapes();
  push("rpn.conv.w", init_conv("rpn", w[3], w[3], 3, rng));
  push("rpn.conv.b", Tensor::zeros({w[3]}));
  push("rpn.cls.w", init_conv("rpn_cls", a * 2, w[3], 1, rng));
  push("rpn.cls.b", Tensor::zeros({a * 2}));
  push("rpn.reg.w", init_conv("rpn_reg", a * 4, w[3], 1, rng));
  push("rpn.reg.b", Tensor::zeros({a * 4}));

  const int pooled = cfg.backbone.out_channels() * cfg.pooled_size * cfg.pooled_size;
  const int id_pooled = w[2] * cfg.pooled_size * cfg.pooled_size;
  push("rcn.fc1.w", init_fc("fc1", cfg.rcn_hidden, pooled, rng));
  push("rcn.fc1.b", Tensor::zeros({cfg.rcn_hidden}));
  push("rcn.cls.w", init_fc("rcn_cls", 2, cfg.rcn_hidden, rng));
  push("rcn.cls.b", Tensor::zeros({2}));
  push("rcn.reg.w", init_fc("rcn_reg", 4, cfg.rcn_hidden, rng));
  push("rcn.reg.b", Tensor::zeros({4}));
  // identity branch parallel to the region head; they share the backbone only
  push("id.fc1.w", init_fc("id_fc1", cfg.id_hidden, id_pooled, rng));
  push("id.fc1.b", Tensor::zeros({cfg.id_hidden}));
  push("id.fc2.w", init_fc("id_fc2", cfg.embed_dim, cfg.id_hidden, rng, 1.0));
  push("id.fc2.b", Tensor::zeros({cfg.embed_dim}));

  for (auto& [name, t] : params_) t.node()->requires_grad = trainable_;

  // Anchors on the feature grid, ordered (y, x, aspect) to match grid_to_rows.
  const int fs = feature_size();
  const int stride = BackboneSpec::kStride;
  for (int y = 0; y < fs; ++y)
    for (int x = 0; x < fs; ++x)
      for (double aspect : cfg.anchor_aspects) {
        const double aw = std::sqrt(cfg.anchor_area * aspect);
        const double ah = std::sqrt(cfg.anchor_area / aspect);
        const double cx = (x + 0.5) * stride;
        const double cy = (y + 0.5) * stride;
        anchors_.push_back(Box{cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2});
      }
}

Tensor PersonSearchModel::param(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  fail("unknown parameter " + name);
}

Tensor PersonSearchModel::fc(const Tensor& x, const std::string& w, const std::string& b) const {
  return add(matmul(param(w), x), param(b));
}

PersonSearchModel::Features PersonSearchModel::backbone_forward(const Tensor& image) const {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != cfg_.image_channels || s[1] != cfg_.image_size ||
      s[2] != cfg_.image_size)
    fail("backbone_forward: image shape " + shape_str(s) + " does not match config");
  Tensor h = relu(conv2d(image, param("backbone.conv1.w"), param("backbone.conv1.b"), 2, 1));
  h = relu(conv2d(h, param("backbone.conv2.w"), param("backbone.conv2.b"), 2, 1));
  Tensor mid = relu(conv2d(h, param("backbone.conv3.w"), param("backbone.conv3.b"), 2, 1));
  Tensor base = relu(conv2d(mid, param("backbone.conv4.w"), param("backbone.conv4.b"), 1, 1));
  return Features{base, mid};
}

RpnOutputs PersonSearchModel::rpn_forward(const Features& features) const {
  const int a = cfg_.num_anchor_shapes();
  Tensor h = relu(conv2d(features.base, param("rpn.conv.w"), param("rpn.conv.b"), 1, 1));
  Tensor cls = conv2d(h, param("rpn.cls.w"), param("rpn.cls.b"), 1, 0);
  Tensor reg = conv2d(h, param("rpn.reg.w"), param("rpn.reg.b"), 1, 0);
  return RpnOutputs{grid_to_rows(cls, a, 2), grid_to_rows(reg, a, 4)};
}

std::vector<Proposal> PersonSearchModel::propose(const RpnOutputs& rpn, int top_k,
                                                 int* dropped_degenerate) const {
  const auto& cls = rpn.cls_rows.value();
  const auto& reg = rpn.reg_rows.value();
  const int n = static_cast<int>(anchors_.size());
  const double img = cfg_.image_size;

  std::vector<Proposal> cands;
  cands.reserve(static_cast<size_t>(n));
  int dropped = 0;
  for (int i = 0; i < n; ++i) {
    Proposal p;
    p.anchor_index = i;
    // two-class logits; the foreground probability orders candidates
    p.score = 1.0 / (1.0 + std::exp(cls[2 * static_cast<size_t>(i)] -
                                    cls[2 * static_cast<size_t>(i) + 1]));
    p.box = apply_deltas(anchors_[static_cast<size_t>(i)], reg.data() + 4 * static_cast<size_t>(i))
                .clipped(img, img);
    if (p.box.width() < 1e-3 || p.box.height() < 1e-3) {
      ++dropped;
      continue;
    }
    cands.push_back(p);
  }
  if (dropped_degenerate) *dropped_degenerate = dropped;

  std::vector<Box> boxes;
  std::vector<double> scores;
  boxes.reserve(cands.size());
  scores.reserve(cands.size());
  for (const auto& c : cands) {
    boxes.push_back(c.box);
    scores.push_back(c.score);
  }
  std::vector<Proposal> kept;
  for (int i : nms(boxes, scores, cfg_.rpn_nms_iou, top_k))
    kept.push_back(cands[static_cast<size_t>(i)]);
  return kept;
}

RoiOutputs PersonSearchModel::roi_forward(const Features& features, const std::vector<Box>& boxes,
                                          bool with_embeddings) const {
  const double stride = BackboneSpec::kStride;
  RoiOutputs out;
  std::vector<Tensor> cls_rows, reg_rows;
  cls_rows.reserve(boxes.size());
  reg_rows.reserve(boxes.size());
  for (const auto& box : boxes) {
    if (!box.valid()) fail("roi_forward: degenerate box");
    Box fbox{box.x1 / stride, box.y1 / stride, box.x2 / stride, box.y2 / stride};
    Tensor pooled = crop_resize(features.base, fbox, cfg_.pooled_size, cfg_.pooled_size);
    Tensor trunk = relu(fc(reshape(pooled, {pooled.numel()}), "rcn.fc1.w", "rcn.fc1.b"));
    cls_rows.push_back(fc(trunk, "rcn.cls.w", "rcn.cls.b"));
    reg_rows.push_back(fc(trunk, "rcn.reg.w", "rcn.reg.b"));
    if (with_embeddings) {
      Tensor id_pooled = crop_resize(features.mid, fbox, cfg_.pooled_size, cfg_.pooled_size);
      Tensor id_trunk = relu(fc(reshape(id_pooled, {id_pooled.numel()}), "id.fc1.w", "id.fc1.b"));
      out.embeddings.push_back(l2_normalize(fc(id_trunk, "id.fc2.w", "id.fc2.b")));
    }
  }
  if (!boxes.empty()) {
    out.cls_rows = stack_rows(cls_rows);
    out.reg_rows = stack_rows(reg_rows);
  }
  return out;
}

Tensor PersonSearchModel::idnet_forward(const Features& features, const Box& box) const {
  return roi_forward(features, {box}, true).embeddings[0];
}

std::vector<Tensor> PersonSearchModel::parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

void PersonSearchModel::load_values(const std::vector<std::pair<std::string, Tensor>>& named) {
  if (named.size() != params_.size())
    fail("load_values: parameter count mismatch (" + std::to_string(named.size()) + " vs " +
         std::to_string(params_.size()) + ")");
  for (size_t i = 0; i < params_.size(); ++i) {
    if (named[i].first != params_[i].first)
      fail("load_values: parameter name mismatch: " + named[i].first + " vs " +
           params_[i].first);
    if (named[i].second.shape() != params_[i].second.shape())
      fail("load_values: shape mismatch for " + named[i].first);
    params_[i].second.mutable_value() = named[i].second.value();
  }
}

int64_t PersonSearchModel::parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

int64_t PersonSearchModel::backbone_parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_)
    if (name.rfind("backbone.", 0) == 0) n += t.numel();
  return n;
}

std::vector<int> match_boxes(const std::vector<Box>& candidates, const std::vector<GtBox>& gt,
                             double pos_iou, double neg_iou) {
  std::vector<int> assign(candidates.size(), -1);
  for (size_t i = 0; i < candidates.size(); ++i) {
    double best = 0;
    int best_gt = -1;
    for (size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(candidates[i], gt[g].box);
      if (v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best >= pos_iou)
      assign[i] = best_gt;
    else if (best < neg_iou)
      assign[i] = -1;
    else
      assign[i] = -2;
  }
  return assign;
}

HeadSample sample_for_training(const std::vector<Box>& candidates, const std::vector<GtBox>& gt,
                               Rng& rng, const SampleConfig& cfg) {
  const auto assign = match_boxes(candidates, gt, cfg.pos_iou, cfg.neg_iou);
  std::vector<int> pos_pool, neg_pool;
  for (size_t i = 0; i < assign.size(); ++i) {
    if (assign[i] >= 0)
      pos_pool.push_back(static_cast<int>(i));
    else if (assign[i] == -1)
      neg_pool.push_back(static_cast<int>(i));
  }
  rng.shuffle(pos_pool);
  rng.shuffle(neg_pool);

  HeadSample s;
  const int n_pos = std::min<int>(cfg.max_pos, static_cast<int>(pos_pool.size()));
  for (int i = 0; i < n_pos; ++i) {
    const int c = pos_pool[static_cast<size_t>(i)];
    s.pos_rows.push_back(static_cast<int>(s.indices.size()));
    s.pos_gt.push_back(assign[static_cast<size_t>(c)]);
    s.reg_targets.push_back(
        box_deltas(candidates[static_cast<size_t>(c)], gt[static_cast<size_t>(assign[static_cast<size_t>(c)])].box));
    s.indices.push_back(c);
    s.labels.push_back(1);
  }
  const int n_neg = std::min<int>(cfg.total - n_pos, static_cast<int>(neg_pool.size()));
  for (int i = 0; i < n_neg; ++i) {
    s.indices.push_back(neg_pool[static_cast<size_t>(i)]);
    s.labels.push_back(0);
  }
  return s;
}

HeadLosses head_losses(const Tensor& cls_rows, const Tensor& reg_rows, const HeadSample& sample) {
  HeadLosses out;
  const int n = static_cast<int>(sample.indices.size());
  if (n == 0) {
    out.cls = Tensor::scalar(0.0);
    out.reg = Tensor::scalar(0.0);
    return out;
  }
  if (cls_rows.dim(0) != n || reg_rows.dim(0) != n)
    fail("head_losses: rows must be aligned with the sample");
  Tensor logp = log_softmax(cls_rows);
  out.cls = scale(sum(pick_per_row(logp, sample.labels)), -1.0 / n);

  if (sample.pos_rows.empty()) {
    out.reg = Tensor::scalar(0.0);
    return out;
  }
  const int np = static_cast<int>(sample.pos_rows.size());
  std::vector<Scalar> targets;
  targets.reserve(static_cast<size_t>(np) * 4);
  for (const auto& t : sample.reg_targets) targets.insert(targets.end(), t.begin(), t.end());
  Tensor pos = take_rows(reg_rows, sample.pos_rows);
  Tensor tgt = Tensor::leaf({np, 4}, std::move(targets));
  out.reg = scale(sum(smooth_l1(pos, tgt)), 1.0 / np);
  return out;
}

DetGtLosses detector_gt_losses(const RpnOutputs& rpn, const HeadSample& rpn_sample,
                               const RoiOutputs& rcn, const HeadSample& rcn_sample) {
  DetGtLosses out;
  // RPN rows span all anchors; select the sampled ones first.
  Tensor rpn_cls = rpn_sample.indices.empty() ? Tensor() : take_rows(rpn.cls_rows, rpn_sample.indices);
  Tensor rpn_reg = rpn_sample.indices.empty() ? Tensor() : take_rows(rpn.reg_rows, rpn_sample.indices);
  HeadSample local = rpn_sample;
  for (size_t i = 0; i < local.indices.size(); ++i) local.indices[i] = static_cast<int>(i);
  auto rpn_losses = local.indices.empty()
                        ? HeadLosses{Tensor::scalar(0.0), Tensor::scalar(0.0)}
                        : head_losses(rpn_cls, rpn_reg, local);
  auto rcn_losses = rcn_sample.indices.empty() || !rcn.cls_rows.defined()
                        ? HeadLosses{Tensor::scalar(0.0), Tensor::scalar(0.0)}
                        : head_losses(rcn.cls_rows, rcn.reg_rows, rcn_sample);
  out.rpn_cls = rpn_losses.cls;
  out.rpn_reg = rpn_losses.reg;
  out.rcn_cls = rcn_losses.cls;
  out.rcn_reg = rcn_losses.reg;
  return out;
}

std::vector<Detection> detect(const PersonSearchModel& model, const Tensor& image,
                              const DetectConfig& cfg) {
  PersonSearchModel::Features features = model.backbone_forward(image);
  RpnOutputs rpn = model.rpn_forward(features);
  std::vector<Proposal> proposals = model.propose(rpn, cfg.top_k_proposals);
  if (proposals.empty()) return {};

  std::vector<Box> boxes;
  boxes.reserve(proposals.size());
  for (const auto& p : proposals) boxes.push_back(p.box);
  RoiOutputs roi = model.roi_forward(features, boxes, false);

  std::vector<Box> refined;
  std::vector<double> scores;
  const auto& cls = roi.cls_rows.value();
  const auto& reg = roi.reg_rows.value();
  const double img = model.config().image_size;
  for (size_t i = 0; i < boxes.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(cls[2 * i] - cls[2 * i + 1]));
    if (s < cfg.score_min) continue;
    Box b = apply_deltas(boxes[i], reg.data() + 4 * i).clipped(img, img);
    if (!b.valid()) continue;
    refined.push_back(b);
    scores.push_back(s);
  }
  const std::vector<int> kept = nms(refined, scores, cfg.nms_iou, cfg.max_detections);
  if (kept.empty()) return {};

  std::vector<Box> final_boxes;
  final_boxes.reserve(kept.size());
  for (int i : kept) final_boxes.push_back(refined[static_cast<size_t>(i)]);
  RoiOutputs id_roi = model.roi_forward(features, final_boxes, true);

  std::vector<Detection> out;
  out.reserve(kept.size());
  for (size_t i = 0; i < kept.size(); ++i) {
    Detection d;
    d.box = final_boxes[i];
    d.score = scores[static_cast<size_t>(kept[i])];
    d.embedding = id_roi.embeddings[i].value();
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace pskd
