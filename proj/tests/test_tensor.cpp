#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pskd/rng.hpp"
#include "pskd/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace pskd;
using pskd_test::check_gradients;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi, double avoid_band = 0.0,
                     bool requires_grad = true) {
  const int n = numel_of(shape);
  std::vector<Scalar> v(static_cast<size_t>(n));
  for (auto& e : v) {
    do {
      e = rng.uniform(lo, hi);
    } while (avoid_band > 0 && std::abs(e) < avoid_band);
  }
  return Tensor::leaf(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("forward op values") {
  auto sm = softmax(Tensor::leaf({2}, {0.0, 0.0}));
  CHECK(sm.value()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sm.value()[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto r = relu(Tensor::leaf({2}, {-1.0, 2.0}));
  CHECK(r.value()[0] == 0.0);
  CHECK(r.value()[1] == 2.0);

  auto n = l2_normalize(Tensor::leaf({2}, {3.0, 4.0}));
  CHECK(n.value()[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(n.value()[1] == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("backward on simple polynomials") {
  auto x = Tensor::leaf({2}, {1.0, 2.0}, true);
  backward(squared_norm(x));
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));

  auto t = Tensor::leaf({3}, {0.5, -1.0, 2.0});
  auto y = Tensor::leaf({3}, {0.5, -1.0, 2.0}, true);
  backward(squared_norm(sub(y, t)));
  for (double g : y.grad()) CHECK(g == doctest::Approx(0.0));
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = Tensor::leaf({2}, {1.0, 2.0}, true);
  CHECK_THROWS_WITH_AS(backward(add(x, x)), doctest::Contains("scalar"), std::runtime_error);
}

TEST_CASE("shape mismatch diagnostics name the op") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), std::runtime_error);
  CHECK_THROWS_WITH_AS(mul(a, b), doctest::Contains("[2,3]"), std::runtime_error);
  CHECK_THROWS_WITH_AS(matmul(a, a), doctest::Contains("matmul"), std::runtime_error);
}

TEST_CASE("conv2d weight gradient matches finite differences") {
  Rng rng(42);
  auto x = random_tensor(rng, {2, 7, 7}, -1, 1);
  auto w = random_tensor(rng, {3, 2, 3, 3}, -1, 1);
  auto b = random_tensor(rng, {3}, -0.5, 0.5);
  for (int stride : {1, 2}) {
    auto loss = [&] { return mean(conv2d(x, w, b, stride, 1)); };
    auto res = check_gradients(loss, {x, w, b});
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("gradient check across the op set, 100+ randomized trials") {
  int trials = 0;
  for (uint64_t seed = 1; seed <= 12; ++seed) {
    Rng rng(seed);
    {
      auto a = random_tensor(rng, {4, 3}, -2, 2);
      auto b = random_tensor(rng, {4, 3}, -2, 2);
      auto res = check_gradients([&] { return sum(mul(add(a, b), sub(a, b))); }, {a, b});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {5}, -2, 2, 0.05);
      auto res = check_gradients([&] { return sum(relu(scale(a, 1.7))); }, {a});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {6}, -3, 3);
      auto res = check_gradients([&] { return mean(sigmoid(a)); }, {a});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {5}, 0.2, 3.0);
      auto res = check_gradients([&] { return sum(log(a)); }, {a});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {3, 5}, -2, 2);
      auto w = Tensor::leaf({5}, {0.3, -0.2, 0.5, 0.1, -0.7});
      auto res = check_gradients(
          [&] { return sum(mul(softmax(a, 0.7), stack_rows({w, w, w}))); }, {a});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {2, 4}, -2, 2);
      auto res = check_gradients([&] { return mean(log_softmax(a, 2.5)); }, {a});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {3, 4}, -1, 1);
      auto b = random_tensor(rng, {4, 2}, -1, 1);
      auto res = check_gradients([&] { return squared_norm(matmul(a, b)); }, {a, b});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {4, 3}, -1, 1);
      auto v = random_tensor(rng, {3}, -1, 1);
      auto res = check_gradients([&] { return sum(matmul(a, v)); }, {a, v});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto x = random_tensor(rng, {1, 6, 6}, -1, 1);
      auto res = check_gradients([&] { return mean(max_pool2d(x)); }, {x});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto x = random_tensor(rng, {2, 9, 9}, -1, 1);
      Box box{1.3, 2.1, 6.8, 7.9};
      auto res = check_gradients([&] { return mean(crop_resize(x, box, 4, 3)); }, {x});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {7}, -2, 2);
      auto b = random_tensor(rng, {7}, -2, 2);
      auto res = check_gradients([&] { return sum(smooth_l1(a, b)); }, {a, b});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {6}, -2, 2, 0.3);
      auto res = check_gradients([&] { return pick(l2_normalize(a), 2); }, {a});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {3}, -1, 1);
      auto b = random_tensor(rng, {4}, -1, 1);
      auto res = check_gradients([&] { return squared_norm(concat({a, b})); }, {a, b});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {5, 3}, -1, 1);
      auto res = check_gradients(
          [&] { return sum(sum_rows(take_rows(a, {0, 2, 2, 4}))); }, {a});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto a = random_tensor(rng, {4, 3}, -2, 2);
      auto res = check_gradients([&] { return mean(pick_per_row(a, {2, 0, 1, 2})); }, {a});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto x = random_tensor(rng, {6, 4, 4}, -1, 1);
      auto res = check_gradients([&] { return squared_norm(grid_to_rows(x, 2, 3)); }, {x});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto x = random_tensor(rng, {2, 6, 6}, -1, 1);
      auto w = random_tensor(rng, {2, 2, 3, 3}, -1, 1);
      auto res = check_gradients(
          [&] { return mean(relu(conv2d(x, w, Tensor(), 1, 1))); }, {x, w});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
    {
      auto x = random_tensor(rng, {8}, -1, 1);
      auto res = check_gradients([&] { return sum(reshape(x, {2, 4})); }, {x});
      CHECK(res.max_rel_err < 1e-4);
      ++trials;
    }
  }
  CHECK(trials >= 100);
}

TEST_CASE("softmax rows sum to one and temperature keeps the argmax") {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    auto x = random_tensor(rng, {3, 6}, -4, 4, 0.0, false);
    for (double temp : {0.1, 1.0, 10.0}) {
      auto y = softmax(x, temp);
      for (int r = 0; r < 3; ++r) {
        double s = 0;
        int amax_x = 0, amax_y = 0;
        for (int c = 0; c < 6; ++c) {
          s += y.value()[r * 6 + c];
          if (x.value()[r * 6 + c] > x.value()[r * 6 + amax_x]) amax_x = c;
          if (y.value()[r * 6 + c] > y.value()[r * 6 + amax_y]) amax_y = c;
        }
        CHECK(std::abs(s - 1.0) < 1e-9);
        CHECK(amax_x == amax_y);
      }
    }
  }
}

TEST_CASE("backward is deterministic bit for bit") {
  auto run = [] {
    Rng rng(11);
    auto x = random_tensor(rng, {2, 8, 8}, -1, 1);
    auto w = random_tensor(rng, {3, 2, 3, 3}, -1, 1);
    auto b = random_tensor(rng, {3}, -1, 1);
    auto h = relu(conv2d(x, w, b, 2, 1));
    auto loss = add(squared_norm(h), mean(h));
    backward(loss);
    return std::make_pair(w.grad(), x.grad());
  };
  auto [g1w, g1x] = run();
  auto [g2w, g2x] = run();
  CHECK(g1w == g2w);
  CHECK(g1x == g2x);
}

TEST_CASE("graph recorded only when an input requires gradients") {
  auto a = Tensor::leaf({2}, {1.0, 2.0}, false);
  auto y = scale(a, 3.0);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());

  auto b = Tensor::leaf({2}, {1.0, 2.0}, true);
  auto z = scale(b, 3.0);
  CHECK(z.requires_grad());
  CHECK(z.node()->parents.size() == 1);
}

TEST_CASE("sgd_step") {
  SUBCASE("zero learning rate leaves parameters unchanged") {
    std::vector<Scalar> p{1.0, -2.0}, g{10.0, 3.0}, v;
    sgd_step(p, g, v, 0.0, 0.9);
    CHECK(p == std::vector<Scalar>{1.0, -2.0});
  }
  SUBCASE("plain step arithmetic") {
    std::vector<Scalar> p{1.0}, g{0.5}, v;
    sgd_step(p, g, v, 1.0, 0.0);
    CHECK(p[0] == doctest::Approx(0.5));
  }
  SUBCASE("two-step momentum sequence matches the hand-computed recurrence") {
    // v1 = 0.9*0 + 2 = 2;      p1 = 1 - 0.1*2  = 0.8
    // v2 = 0.9*2 + (-1) = 0.8; p2 = 0.8 - 0.1*0.8 = 0.72
    std::vector<Scalar> p{1.0}, v;
    sgd_step(p, {2.0}, v, 0.1, 0.9);
    CHECK(p[0] == doctest::Approx(0.8).epsilon(1e-12));
    sgd_step(p, {-1.0}, v, 0.1, 0.9);
    CHECK(p[0] == doctest::Approx(0.72).epsilon(1e-12));
  }
  SUBCASE("non-finite gradient aborts with a diagnostic") {
    std::vector<Scalar> p{1.0}, v;
    CHECK_THROWS_WITH_AS(sgd_step(p, {std::nan("")}, v, 0.1, 0.0),
                         doctest::Contains("non-finite"), std::runtime_error);
  }
  SUBCASE("missing gradient is treated as zero by the optimizer class") {
    auto p = Tensor::leaf({2}, {1.0, 2.0}, true);
    Sgd opt({p}, 0.5, 0.9);
    opt.step();
    CHECK(p.value() == std::vector<Scalar>{1.0, 2.0});
  }
}
