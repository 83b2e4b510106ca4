#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "pskd/kd.hpp"
#include "support/gradcheck.hpp"

using namespace pskd;
namespace fs = std::filesystem;

namespace {

AdaptationLayer identity_adapter(int channels) {
  AdaptationLayer a;
  std::vector<Scalar> w(static_cast<size_t>(channels) * channels, 0.0);
  for (int i = 0; i < channels; ++i) w[static_cast<size_t>(i) * channels + i] = 1.0;
  a.weight = Tensor::leaf({channels, channels, 1, 1}, std::move(w), true);
  a.bias = Tensor::zeros({channels}, true);
  return a;
}

// Independent elementwise oracle for the hint penalty.
double hint_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

TEST_CASE("hint loss values") {
  auto adapter = identity_adapter(1);
  Tensor fs_equal = Tensor::leaf({1, 1, 3}, {1, 2, 2}, true);
  CHECK(hint_loss(fs_equal, fs_equal.detach(), adapter).item() == doctest::Approx(0.0));

  Tensor ft = Tensor::zeros({1, 1, 3});
  CHECK(hint_loss(fs_equal, ft, adapter).item() == doctest::Approx(9.0));
  CHECK(hint_loss(fs_equal, ft, adapter, /*mean=*/true).item() == doctest::Approx(3.0));

  Rng rng(31);
  std::vector<double> av(24), bv(24);
  for (auto& v : av) v = rng.normal();
  for (auto& v : bv) v = rng.normal();
  Tensor a = Tensor::leaf({2, 3, 4}, std::vector<Scalar>(av.begin(), av.end()), true);
  Tensor b = Tensor::leaf({2, 3, 4}, std::vector<Scalar>(bv.begin(), bv.end()));
  CHECK(hint_loss(a, b, identity_adapter(2)).item() ==
        doctest::Approx(hint_oracle(av, bv)).epsilon(1e-12));
}

TEST_CASE("hint loss is nonnegative, zero only at equality, and differentiable") {
  Rng rng(7);
  std::vector<Scalar> fsv(18), ftv(18);
  for (auto& v : fsv) v = rng.normal();
  for (auto& v : ftv) v = rng.normal();
  Tensor fs = Tensor::leaf({2, 3, 3}, fsv, true);
  Tensor ft = Tensor::leaf({2, 3, 3}, ftv);
  auto adapter = AdaptationLayer::init(2, 2, rng);
  CHECK(hint_loss(fs, ft, adapter).item() > 0.0);

  auto res = pskd_test::check_gradients(
      [&] { return hint_loss(fs, ft, adapter); }, {fs, adapter.weight, adapter.bias});
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("soft cross entropy: uniform student gives ln C for any teacher") {
  for (int c : {2, 3, 5}) {
    Tensor student = Tensor::zeros({2, c}, true);
    Rng rng(c);
    std::vector<Scalar> tv(static_cast<size_t>(2 * c));
    for (auto& v : tv) v = rng.normal(0, 3);
    Tensor teacher = Tensor::leaf({2, c}, std::move(tv));
    CHECK(soft_cls_loss(student, teacher, 10.0).item() ==
          doctest::Approx(std::log(c)).epsilon(1e-10));
  }
}

TEST_CASE("soft cross entropy: hand-computed value for fixed distributions") {
  // teacher [0.9,0.1], student [0.7,0.3] at unit temperature:
  // -(0.9 ln 0.7 + 0.1 ln 0.3) = 0.4414
  Tensor student = Tensor::leaf({1, 2}, {std::log(0.7), std::log(0.3)}, true);
  Tensor teacher = Tensor::leaf({1, 2}, {std::log(0.9), std::log(0.1)});
  const double expected = -(0.9 * std::log(0.7) + 0.1 * std::log(0.3));
  CHECK(expected == doctest::Approx(0.4414).epsilon(1e-4));
  CHECK(soft_cls_loss(student, teacher, 1.0).item() == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("soft cross entropy: teacher equals student gives the softened entropy") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Scalar> v(6);
    for (auto& e : v) e = rng.normal(0, 2);
    Tensor logits = Tensor::leaf({2, 3}, v, true);
    Tensor same = Tensor::leaf({2, 3}, v);
    const double t = rng.uniform(0.5, 12.0);
    const double loss = soft_cls_loss(logits, same, t).item();
    // entropy of the softened rows, computed independently
    double entropy = 0;
    for (int r = 0; r < 2; ++r) {
      double z = 0;
      for (int c = 0; c < 3; ++c) z += std::exp(v[static_cast<size_t>(r * 3 + c)] / t);
      for (int c = 0; c < 3; ++c) {
        const double p = std::exp(v[static_cast<size_t>(r * 3 + c)] / t) / z;
        entropy -= p * std::log(p);
      }
    }
    entropy /= 2;
    CHECK(loss == doctest::Approx(entropy).epsilon(1e-9));

    // Gibbs: any other student is at least as costly
    std::vector<Scalar> w(6);
    for (auto& e : w) e = rng.normal(0, 2);
    Tensor other = Tensor::leaf({2, 3}, w, true);
    CHECK(soft_cls_loss(other, same, t).item() >= entropy - 1e-12);
  }
}

TEST_CASE("soft cross entropy gradient check") {
  Rng rng(13);
  std::vector<Scalar> sv(8), tv(8);
  for (auto& v : sv) v = rng.normal(0, 2);
  for (auto& v : tv) v = rng.normal(0, 2);
  Tensor student = Tensor::leaf({2, 4}, sv, true);
  Tensor teacher = Tensor::leaf({2, 4}, tv);
  auto res = pskd_test::check_gradients(
      [&] { return soft_cls_loss(student, teacher, 10.0); }, {student});
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("classification blend boundaries and arithmetic") {
  Tensor g = Tensor::scalar(0.2, true);
  Tensor t = Tensor::scalar(0.4, true);
  CHECK(combined_cls_loss(g, t, 1.0).item() == doctest::Approx(0.2));
  CHECK(combined_cls_loss(g, t, 0.0).item() == doctest::Approx(0.4));
  CHECK(combined_cls_loss(g, t, 0.5).item() == doctest::Approx(0.3));
  CHECK_THROWS_WITH_AS(combined_cls_loss(g, t, 1.5), doctest::Contains("mu"),
                       std::runtime_error);
  CHECK_THROWS_AS(combined_cls_loss(g, t, -0.1), std::runtime_error);
}

TEST_CASE("regression blend arithmetic and validation") {
  Tensor g = Tensor::scalar(1.0, true);
  Tensor t = Tensor::scalar(0.5, true);
  CHECK(combined_reg_loss(g, t, 0.0).item() == doctest::Approx(1.0));
  CHECK(combined_reg_loss(g, t, 0.5).item() == doctest::Approx(1.25));
  CHECK(combined_reg_loss(g, Tensor::scalar(0.0), 0.5).item() == doctest::Approx(1.0));
  CHECK_THROWS_AS(combined_reg_loss(Tensor::scalar(-1.0), t, 0.5), std::runtime_error);
  CHECK_THROWS_AS(combined_reg_loss(g, t, -0.5), std::runtime_error);
}

TEST_CASE("bounded regression: active only when the student is worse") {
  // row errors: student 1.0 vs teacher 0.5 -> contributes 1.0
  Tensor student = Tensor::leaf({1, 4}, {1.0, 0.0, 0.0, 0.0}, true);
  std::vector<std::array<double, 4>> teacher = {{std::sqrt(0.5), 0, 0, 0}};
  std::vector<std::array<double, 4>> targets = {{0, 0, 0, 0}};
  CHECK(bounded_reg_loss(student, teacher, targets, 0.0).item() == doctest::Approx(1.0));

  // student 0.2 vs teacher 0.5 -> already better, contributes nothing
  Tensor better = Tensor::leaf({1, 4}, {std::sqrt(0.2), 0.0, 0.0, 0.0}, true);
  CHECK(bounded_reg_loss(better, teacher, targets, 0.0).item() == doctest::Approx(0.0));

  // exact predictions cost nothing whatever the teacher does
  Tensor exact = Tensor::leaf({2, 4}, {0.1, 0.2, 0.3, 0.4, -1, -2, -3, -4}, true);
  std::vector<std::array<double, 4>> teacher2 = {{9, 9, 9, 9}, {0, 0, 0, 0}};
  std::vector<std::array<double, 4>> targets2 = {{0.1, 0.2, 0.3, 0.4}, {-1, -2, -3, -4}};
  CHECK(bounded_reg_loss(exact, teacher2, targets2, 0.0).item() == doctest::Approx(0.0));

  // margin can keep the term active even when slightly better
  CHECK(bounded_reg_loss(better, teacher, targets, 0.4).item() ==
        doctest::Approx(0.2).epsilon(1e-9));
  // zero rows -> zero loss
  CHECK(bounded_reg_loss(Tensor(), {}, {}, 0.0).item() == 0.0);
}

TEST_CASE("bounded regression gradient check (away from the gate boundary)") {
  Rng rng(23);
  std::vector<Scalar> sv(12);
  for (auto& v : sv) v = rng.normal(0, 1);
  Tensor student = Tensor::leaf({3, 4}, sv, true);
  std::vector<std::array<double, 4>> teacher(3), targets(3);
  for (auto& t : teacher)
    for (auto& v : t) v = rng.normal(0, 0.05);  // teacher is accurate: gates stay open
  for (auto& t : targets)
    for (auto& v : t) v = rng.normal(0, 0.05);
  auto res = pskd_test::check_gradients(
      [&] { return bounded_reg_loss(student, teacher, targets, 0.0); }, {student});
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("total objective composition") {
  ObjectiveTerms terms;
  terms.rpn_cls = Tensor::scalar(0.0, true);
  terms.rpn_reg = Tensor::scalar(0.0);
  terms.rcn_cls = Tensor::scalar(0.0);
  terms.rcn_reg = Tensor::scalar(0.0);
  CHECK(total_objective(terms).item() == doctest::Approx(0.0));

  terms.rpn_cls = Tensor::scalar(1.0, true);
  terms.rpn_reg = Tensor::scalar(1.0);
  terms.rcn_cls = Tensor::scalar(1.0);
  terms.rcn_reg = Tensor::scalar(1.0);
  terms.hint = Tensor::scalar(2.0);
  terms.oim = Tensor::scalar(3.0);
  terms.lambda_hint = 0.5;
  terms.lambda_oim = 0.1;
  CHECK(total_objective(terms).item() == doctest::Approx(5.3).epsilon(1e-12));

  // disabling the identity term recovers the pure detector objective
  ObjectiveTerms det = terms;
  det.hint = Tensor();
  det.oim = Tensor();
  CHECK(total_objective(det).item() == doctest::Approx(4.0));
}

TEST_CASE("distillation losses leave the teacher untouched") {
  Rng rng(5);
  std::vector<Scalar> tv(8);
  for (auto& v : tv) v = rng.normal();
  // teacher logits marked trainable: gradients must still not reach them,
  // because the loss detaches teacher inputs
  Tensor teacher = Tensor::leaf({2, 4}, tv, true);
  std::vector<Scalar> sv(8);
  for (auto& v : sv) v = rng.normal();
  Tensor student = Tensor::leaf({2, 4}, sv, true);
  Tensor loss = soft_cls_loss(student, teacher, 10.0);
  backward(loss);
  CHECK(student.has_grad());
  CHECK_FALSE(teacher.has_grad());
}

TEST_CASE("frozen-table attachment validates dimensions and applies the default weight") {
  Rng rng(3);
  LookupTable lut = LookupTable::random(16, 8, rng);
  const std::string path = (fs::temp_directory_path() / "pskd_attach.pslut").string();
  write_lut(lut, path);

  auto attach = kd_reid_attach(path, 16, 8);
  CHECK(attach.lut.frozen());
  CHECK(attach.lambda_oim == doctest::Approx(0.1));
  CHECK(attach.lut.dim() == 16);

  auto attach2 = kd_reid_attach(path, 16, 8, 0.25);
  CHECK(attach2.lambda_oim == doctest::Approx(0.25));

  CHECK_THROWS_WITH_AS(kd_reid_attach(path, 32, 8), doctest::Contains("dimension"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(kd_reid_attach(path, 16, 4), doctest::Contains("identity space"),
                       std::runtime_error);
  fs::remove(path);
}
