#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "pskd/oim.hpp"
#include "pskd/rng.hpp"
#include "pskd/tensor.hpp"

namespace pskd {

struct KdDetConfig {
  double mu = 0.5;           // ground-truth weight in the classification blend
  double gamma = 0.5;        // teacher weight added to the regression loss
  double lambda_hint = 0.5;
  double temperature = 10.0;
  double margin = 0.0;       // slack before the bounded regression term fires
  bool hint_mean = true;     // per-element mean; the plain sum swamps the objective
};

/// Learnable 1x1 conv mapping student feature channels onto the teacher's.
struct AdaptationLayer {
  Tensor weight;  // [teacher_ch, student_ch, 1, 1]
  Tensor bias;    // [teacher_ch]

  static AdaptationLayer init(int student_channels, int teacher_channels, Rng& rng);
  Tensor apply(const Tensor& student_features) const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

/// Squared-L2 distance between adapted student features and (constant)
/// teacher features. Sum over elements by default.
Tensor hint_loss(const Tensor& student_features, const Tensor& teacher_features,
                 const AdaptationLayer& adapter, bool mean_per_element = false);

/// Soft cross entropy between temperature-softened distributions, mean over
/// rows. teacher_logit_rows is treated as constant.
Tensor soft_cls_loss(const Tensor& student_logit_rows, const Tensor& teacher_logit_rows,
                     double temperature);

/// mu * gt + (1 - mu) * teacher. mu must lie in [0,1].
Tensor combined_cls_loss(const Tensor& gt_loss, const Tensor& teacher_loss, double mu);

/// Per row: squared error of the student deltas against the target, counted
/// only when it exceeds the teacher's squared error plus the margin;
/// averaged over rows (zero when there are none).
Tensor bounded_reg_loss(const Tensor& student_delta_rows,
                        const std::vector<std::array<double, 4>>& teacher_deltas,
                        const std::vector<std::array<double, 4>>& targets, double margin);

/// gt + gamma * teacher. Rejects negative operands.
Tensor combined_reg_loss(const Tensor& gt_loss, const Tensor& teacher_loss, double gamma);

/// The full training objective: four detector terms plus optional weighted
/// hint and identity-matching terms.
struct ObjectiveTerms {
  Tensor rpn_cls, rpn_reg, rcn_cls, rcn_reg;
  Tensor hint;  // undefined when detector distillation is off
  Tensor oim;   // undefined when the identity loss is off
  double lambda_hint = 0.0;
  double lambda_oim = 0.0;
};

Tensor total_objective(const ObjectiveTerms& terms);

/// Loads a teacher lookup table and freezes it for a student with the given
/// embedding dimension and identity count. Returns the effective identity
/// loss weight: 0.1 unless the caller overrides it.
struct LutAttachment {
  LookupTable lut;
  double lambda_oim = 0.1;
};

LutAttachment kd_reid_attach(const std::string& lut_path, int embed_dim, int num_ids,
                             std::optional<double> lambda_override = std::nullopt);

}  // namespace pskd
