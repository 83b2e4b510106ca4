#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pskd/model.hpp"

using namespace pskd;

namespace {

PersonSearchModel make_model(BackboneSize size, uint64_t seed = 3) {
  Rng rng(seed);
  return PersonSearchModel(ModelConfig::make(size), &rng);
}

// Brute-force IoU used to pin the NMS example independently of common.hpp.
double iou_oracle(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0 || h <= 0) return 0;
  const double inter = w * h;
  const double areas = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1);
  return inter / (areas - inter);
}

}  // namespace

TEST_CASE("zero image with zero biases gives all-zero features") {
  auto model = make_model(BackboneSize::kLarge);
  Tensor image = Tensor::zeros({1, 96, 96});
  auto f = model.backbone_forward(image);
  for (double v : f.base.value()) CHECK(v == 0.0);
  for (double v : f.mid.value()) CHECK(v == 0.0);
}

TEST_CASE("backbone is deterministic under a fixed seed") {
  auto a = make_model(BackboneSize::kLarge, 11);
  auto b = make_model(BackboneSize::kLarge, 11);
  Rng rng(5);
  std::vector<Scalar> img(96 * 96);
  for (auto& v : img) v = rng.uniform();
  Tensor image = Tensor::leaf({1, 96, 96}, img);
  CHECK(a.backbone_forward(image).base.value() == b.backbone_forward(image).base.value());
}

TEST_CASE("small backbone has at most half the parameters of the large one") {
  auto large = make_model(BackboneSize::kLarge);
  auto small = make_model(BackboneSize::kSmall);
  const double backbone_ratio = static_cast<double>(small.backbone_parameter_count()) /
                                static_cast<double>(large.backbone_parameter_count());
  CHECK(backbone_ratio <= 0.5);
  const double total_ratio = static_cast<double>(small.parameter_count()) /
                             static_cast<double>(large.parameter_count());
  CHECK(total_ratio <= 0.5);
}

TEST_CASE("propose orders and breaks ties by anchor index") {
  auto model = make_model(BackboneSize::kLarge);
  const int n = static_cast<int>(model.anchors().size());
  RpnOutputs rpn;
  rpn.cls_rows = Tensor::zeros({n, 2});  // all-equal logits
  rpn.reg_rows = Tensor::zeros({n, 4});

  auto proposals = model.propose(rpn, 16);
  REQUIRE(!proposals.empty());
  for (size_t i = 1; i < proposals.size(); ++i)
    CHECK(proposals[i].anchor_index > proposals[i - 1].anchor_index);

  // one dominant anchor ranks first
  std::vector<Scalar> cls(static_cast<size_t>(n) * 2, 0.0);
  cls[2 * 40 + 1] = 5.0;
  rpn.cls_rows = Tensor::leaf({n, 2}, std::move(cls));
  proposals = model.propose(rpn, 16);
  CHECK(proposals[0].anchor_index == 40);
}

TEST_CASE("propose drops degenerate boxes and reports the count") {
  auto model = make_model(BackboneSize::kLarge);
  const int n = static_cast<int>(model.anchors().size());
  RpnOutputs rpn;
  rpn.cls_rows = Tensor::zeros({n, 2});
  // shift every box four widths to the left: boxes near the left edge clip
  // to zero width and must be dropped
  std::vector<Scalar> reg(static_cast<size_t>(n) * 4, 0.0);
  for (int i = 0; i < n; ++i) reg[4 * static_cast<size_t>(i)] = -4.0;
  rpn.reg_rows = Tensor::leaf({n, 4}, std::move(reg));
  int dropped = 0;
  model.propose(rpn, 16, &dropped);
  CHECK(dropped > 0);
}

TEST_CASE("nms keeps two of three hand-built boxes") {
  std::vector<Box> boxes = {
      {10, 10, 30, 50},
      {11, 10, 31, 50},   // near-duplicate of the first
      {60, 20, 80, 60},
  };
  CHECK(iou_oracle(boxes[0], boxes[1]) == doctest::Approx(19.0 / 21.0));  // 0.905
  CHECK(iou_oracle(boxes[0], boxes[2]) == 0.0);
  auto kept = nms(boxes, {0.9, 0.8, 0.7}, 0.7, 10);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0] == 0);
  CHECK(kept[1] == 2);
}

TEST_CASE("embeddings are unit norm and identical for identical boxes") {
  auto model = make_model(BackboneSize::kLarge, 17);
  Rng rng(2);
  std::vector<Scalar> img(96 * 96);
  for (auto& v : img) v = rng.uniform();
  Tensor image = Tensor::leaf({1, 96, 96}, img);
  auto f = model.backbone_forward(image);
  Box box{20, 20, 40, 56};
  Tensor e1 = model.idnet_forward(f, box);
  Tensor e2 = model.idnet_forward(f, box);
  double n2 = 0;
  for (double v : e1.value()) n2 += v * v;
  CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-6);
  CHECK(e1.value() == e2.value());
}

TEST_CASE("match_boxes applies the overlap thresholds") {
  std::vector<GtBox> gt = {{Box{0, 0, 10, 10}, 0}};
  std::vector<Box> candidates = {
      {0, 0, 10, 10},   // iou 1.0 -> positive
      {0, 0, 10, 7},    // iou 0.7 -> positive
      {0, 0, 10, 4},    // iou 0.4 -> ignored
      {0, 0, 10, 2.9},  // iou 0.29 -> negative
      {20, 20, 30, 30}, // iou 0 -> negative
  };
  auto assign = match_boxes(candidates, gt, 0.5, 0.3);
  CHECK(assign[0] == 0);
  CHECK(assign[1] == 0);
  CHECK(assign[2] == -2);
  CHECK(assign[3] == -1);
  CHECK(assign[4] == -1);
}

TEST_CASE("head losses: exact values against hand computation") {
  // three candidates, labels [person, background, person]
  HeadSample sample;
  sample.indices = {0, 1, 2};
  sample.labels = {1, 0, 1};
  sample.pos_rows = {0, 2};
  sample.pos_gt = {0, 0};
  sample.reg_targets = {{0.1, 0.2, 0.0, 0.0}, {0.0, 0.0, 0.3, -0.1}};

  Tensor cls = Tensor::leaf({3, 2}, {2.0, 0.0, /**/ 0.0, 0.0, /**/ 1.0, 3.0}, true);
  Tensor reg = Tensor::leaf({3, 4},
                            {0.1, 0.2, 0.0, 0.0,    // row 0 == target: no loss
                             9.0, 9.0, 9.0, 9.0,    // background row, ignored
                             0.0, 0.0, 0.3, 1.4},   // errors 0,0,0,1.5
                            true);
  auto losses = head_losses(cls, reg, sample);

  // cross entropy by hand: -log p(label) per row, averaged
  const double ce0 = -std::log(std::exp(0.0) / (std::exp(2.0) + std::exp(0.0)));
  const double ce1 = -std::log(std::exp(0.0) / (std::exp(0.0) + std::exp(0.0)));
  const double ce2 = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(3.0)));
  CHECK(losses.cls.item() == doctest::Approx((ce0 + ce1 + ce2) / 3).epsilon(1e-10));
  // uniform logits row contributes exactly ln 2
  CHECK(ce1 == doctest::Approx(std::log(2.0)));

  // smooth-L1: row0 exact match -> 0; row2 single error 1.5 -> 1.5 - 0.5 = 1.0
  CHECK(losses.reg.item() == doctest::Approx((0.0 + 1.0) / 2).epsilon(1e-10));

  // predictions equal to targets everywhere -> zero regression loss
  Tensor reg_perfect = Tensor::leaf({3, 4},
                                    {0.1, 0.2, 0.0, 0.0,
                                     0.0, 0.0, 0.0, 0.0,
                                     0.0, 0.0, 0.3, -0.1});
  CHECK(head_losses(cls, reg_perfect, sample).reg.item() == doctest::Approx(0.0));
}

TEST_CASE("zero ground truth gives classification-only losses") {
  auto model = make_model(BackboneSize::kLarge);
  Rng rng(9);
  auto sample = sample_for_training(model.anchors(), {}, rng, SampleConfig{});
  CHECK(!sample.indices.empty());
  CHECK(sample.pos_rows.empty());
  for (int label : sample.labels) CHECK(label == 0);

  const int n = static_cast<int>(sample.indices.size());
  Tensor cls = Tensor::zeros({n, 2}, true);
  Tensor reg = Tensor::zeros({n, 4}, true);
  HeadSample local = sample;
  for (size_t i = 0; i < local.indices.size(); ++i) local.indices[i] = static_cast<int>(i);
  auto losses = head_losses(cls, reg, local);
  CHECK(losses.cls.item() == doctest::Approx(std::log(2.0)));
  CHECK(losses.reg.item() == 0.0);
}

TEST_CASE("balanced sampling caps positives and fills with negatives") {
  auto model = make_model(BackboneSize::kLarge);
  // one GT matching several anchors
  std::vector<GtBox> gt = {{Box{40, 28, 56, 64}, 0}};
  Rng rng(4);
  auto sample = sample_for_training(model.anchors(), gt, rng, SampleConfig{});
  CHECK(static_cast<int>(sample.indices.size()) <= 16);
  CHECK(static_cast<int>(sample.pos_rows.size()) <= 8);
  CHECK(!sample.pos_rows.empty());  // anchor layout covers the person size range
  // reg targets reproduce the matched gt box
  for (size_t i = 0; i < sample.pos_rows.size(); ++i) {
    const int cand = sample.indices[static_cast<size_t>(sample.pos_rows[i])];
    Box rebuilt = apply_deltas(model.anchors()[static_cast<size_t>(cand)],
                               sample.reg_targets[i].data());
    CHECK(iou(rebuilt, gt[0].box) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("box delta round trip") {
  Box a{10.5, 20.25, 30, 60};
  Box b{12, 18, 36, 70.5};
  auto d = box_deltas(a, b);
  Box c = apply_deltas(a, d.data());
  CHECK(c.x1 == doctest::Approx(b.x1).epsilon(1e-9));
  CHECK(c.y1 == doctest::Approx(b.y1).epsilon(1e-9));
  CHECK(c.x2 == doctest::Approx(b.x2).epsilon(1e-9));
  CHECK(c.y2 == doctest::Approx(b.y2).epsilon(1e-9));
}
