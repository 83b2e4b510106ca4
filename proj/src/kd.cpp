#include "pskd/kd.hpp"

#include <cmath>

namespace pskd {

AdaptationLayer AdaptationLayer::init(int student_channels, int teacher_channels, Rng& rng) {
  AdaptationLayer a;
  std::vector<Scalar> w(static_cast<size_t>(teacher_channels) * student_channels);
  const double std = std::sqrt(2.0 / student_channels);
  for (auto& e : w) e = rng.normal(0, std);
  a.weight = Tensor::leaf({teacher_channels, student_channels, 1, 1}, std::move(w), true);
  a.bias = Tensor::zeros({teacher_channels}, true);
  return a;
}

Tensor AdaptationLayer::apply(const Tensor& student_features) const {
  return conv2d(student_features, weight, bias, 1, 0);
}

std::vector<std::pair<std::string, Tensor>> AdaptationLayer::named_parameters() const {
  return {{"kd.adapt.w", weight}, {"kd.adapt.b", bias}};
}

Tensor hint_loss(const Tensor& student_features, const Tensor& teacher_features,
                 const AdaptationLayer& adapter, bool mean_per_element) {
  Tensor adapted = adapter.apply(student_features);
  if (adapted.shape() != teacher_features.shape())
    fail("hint_loss: adapted student shape " + shape_str(adapted.shape()) +
         " does not match teacher shape " + shape_str(teacher_features.shape()));
  Tensor l = squared_norm(sub(adapted, teacher_features));
  if (mean_per_element) l = scale(l, 1.0 / teacher_features.numel());
  return l;
}

Tensor soft_cls_loss(const Tensor& student_logit_rows, const Tensor& teacher_logit_rows,
                     double temperature) {
  if (student_logit_rows.shape() != teacher_logit_rows.shape())
    fail("soft_cls_loss: shape mismatch " + shape_str(student_logit_rows.shape()) + " vs " +
         shape_str(teacher_logit_rows.shape()));
  const auto& s = student_logit_rows.shape();
  const int rows = s.size() == 2 ? s[0] : 1;
  const int cols = s.size() == 2 ? s[1] : s[0];
  if (cols < 2) fail("soft_cls_loss: need at least 2 classes");

  // Softened teacher distribution, computed outside the graph.
  Tensor pt_const = softmax(teacher_logit_rows.detach(), temperature).detach();
  Tensor logp = log_softmax(student_logit_rows, temperature);
  return scale(sum(mul(pt_const, logp)), -1.0 / rows);
}

Tensor combined_cls_loss(const Tensor& gt_loss, const Tensor& teacher_loss, double mu) {
  if (mu < 0 || mu > 1) fail("combined_cls_loss: mu must be in [0,1], got " + std::to_string(mu));
  return add(scale(gt_loss, mu), scale(teacher_loss, 1.0 - mu));
}

Tensor bounded_reg_loss(const Tensor& student_delta_rows,
                        const std::vector<std::array<double, 4>>& teacher_deltas,
                        const std::vector<std::array<double, 4>>& targets, double margin) {
  if (margin < 0) fail("bounded_reg_loss: margin must be nonnegative");
  if (teacher_deltas.size() != targets.size())
    fail("bounded_reg_loss: teacher/target count mismatch");
  const int n = static_cast<int>(targets.size());
  if (n == 0) return Tensor::scalar(0.0);
  if (student_delta_rows.shape() != Shape{n, 4})
    fail("bounded_reg_loss: student rows must be [" + std::to_string(n) + ",4], got " +
         shape_str(student_delta_rows.shape()));

  std::vector<Scalar> target_flat;
  target_flat.reserve(static_cast<size_t>(n) * 4);
  for (const auto& t : targets) target_flat.insert(target_flat.end(), t.begin(), t.end());
  Tensor target_rows = Tensor::leaf({n, 4}, std::move(target_flat));

  Tensor diff = sub(student_delta_rows, target_rows);
  Tensor student_err = sum_rows(mul(diff, diff));  // [n]

  // Gate each row on values: active only when the student is worse than the
  // teacher by more than the margin.
  std::vector<Scalar> gate(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    double teacher_err = 0;
    for (int c = 0; c < 4; ++c) {
      const double d = teacher_deltas[static_cast<size_t>(i)][static_cast<size_t>(c)] -
                       targets[static_cast<size_t>(i)][static_cast<size_t>(c)];
      teacher_err += d * d;
    }
    if (student_err.value()[static_cast<size_t>(i)] + margin > teacher_err)
      gate[static_cast<size_t>(i)] = 1.0;
  }
  return scale(sum(mul(student_err, Tensor::leaf({n}, std::move(gate)))), 1.0 / n);
}

Tensor combined_reg_loss(const Tensor& gt_loss, const Tensor& teacher_loss, double gamma) {
  if (gamma < 0) fail("combined_reg_loss: gamma must be nonnegative");
  if (gt_loss.item() < -1e-12 || teacher_loss.item() < -1e-12)
    fail("combined_reg_loss: losses must be nonnegative");
  return add(gt_loss, scale(teacher_loss, gamma));
}

Tensor total_objective(const ObjectiveTerms& terms) {
  Tensor total = add(add(terms.rpn_cls, terms.rpn_reg), add(terms.rcn_cls, terms.rcn_reg));
  if (terms.hint.defined()) total = add(total, scale(terms.hint, terms.lambda_hint));
  if (terms.oim.defined()) total = add(total, scale(terms.oim, terms.lambda_oim));
  return total;
}

LutAttachment kd_reid_attach(const std::string& lut_path, int embed_dim, int num_ids,
                             std::optional<double> lambda_override) {
  LookupTable source = read_lut(lut_path);
  if (source.dim() != embed_dim)
    fail("kd_reid_attach: teacher table dimension " + std::to_string(source.dim()) +
         " does not match student embedding dimension " + std::to_string(embed_dim));
  if (source.num_ids() != num_ids)
    fail("kd_reid_attach: teacher identity space (" + std::to_string(source.num_ids()) +
         ") does not match the student's (" + std::to_string(num_ids) + ")");
  LutAttachment out;
  out.lut = LookupTable::copy_frozen(source);
  out.lambda_oim = lambda_override.value_or(0.1);
  return out;
}

}  // namespace pskd
