#include <doctest.h>

#include <cmath>
#include <limits>

#include "support/gradcheck.hpp"
#include "support/primitive_cases.hpp"
#include "vitprune/optim.hpp"
#include "vitprune/tensor.hpp"

using namespace vp;
using vp::testing::check_gradients;
using vp::testing::primitive_cases;
using vp::testing::project;
using vp::testing::random_tensor;

TEST_CASE("matmul with identity returns the operand") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto a = Tensor::from_data({2, 2}, {1.5, -2, 3.25, 4});
  auto out = matmul(eye, a);
  CHECK(out.shape() == Shape{2, 2});
  for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == a.data()[i]);
}

TEST_CASE("softmax of zeros is uniform") {
  auto out = softmax(Tensor::zeros({4}), 0);
  for (double v : out.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("layer_norm matches a hand-computed mean/variance") {
  auto x = Tensor::from_data({3}, {1, 2, 3});
  auto y = layer_norm(x, 0, 1e-5);
  const double mu = 2.0;
  const double var = (1.0 + 0.0 + 1.0) / 3.0;
  const double denom = std::sqrt(var + 1e-5);
  CHECK(y.data()[0] == doctest::Approx((1 - mu) / denom).epsilon(1e-14));
  CHECK(y.data()[1] == doctest::Approx(0.0));
  CHECK(y.data()[2] == doctest::Approx((3 - mu) / denom).epsilon(1e-14));
}

TEST_CASE("layer_norm output statistics") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor(rng, {5, 9}, -3, 3, false);
    auto y0 = layer_norm(x, 1, 0.0);
    auto y = layer_norm(x, 1, 1e-5);
    for (int r = 0; r < 5; ++r) {
      double m = 0, v = 0, m0 = 0, v0 = 0, raw_m = 0, raw_v = 0;
      for (int c = 0; c < 9; ++c) {
        m += y.at({r, c}) / 9;
        m0 += y0.at({r, c}) / 9;
        raw_m += x.at({r, c}) / 9;
      }
      for (int c = 0; c < 9; ++c) {
        v += std::pow(y.at({r, c}) - m, 2) / 9;
        v0 += std::pow(y0.at({r, c}) - m0, 2) / 9;
        raw_v += std::pow(x.at({r, c}) - raw_m, 2) / 9;
      }
      CHECK(std::abs(m) < 1e-9);
      CHECK(std::abs(v0 - 1.0) < 1e-9);
      // With eps > 0 the variance is var/(var+eps) exactly.
      CHECK(std::abs(v - raw_v / (raw_v + 1e-5)) < 1e-9);
    }
  }
  // Axis other than the last.
  auto x = random_tensor(rng, {6, 3}, -2, 2, false);
  auto y = layer_norm(x, 0, 0.0);
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (int r = 0; r < 6; ++r) m += y.at({r, c});
    CHECK(std::abs(m) < 1e-9);
  }
}

TEST_CASE("softmax rows sum to one and stay in (0,1)") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor(rng, {4, 6, 5}, -8, 8, false);
    for (int axis : {0, 1, 2}) {
      auto y = softmax(x, axis);
      auto s = sum(y, axis);
      for (double v : s.data()) CHECK(std::abs(v - 1.0) <= 1e-12);
      for (double v : y.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
  }
}

TEST_CASE("gelu uses the tanh approximation") {
  auto y = gelu(Tensor::from_data({3}, {-1.0, 0.0, 2.0}));
  auto ref = [](double x) {
    return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
  };
  CHECK(y.data()[0] == doctest::Approx(ref(-1.0)).epsilon(1e-15));
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == doctest::Approx(ref(2.0)).epsilon(1e-15));
}

TEST_CASE("cross_entropy") {
  SUBCASE("uniform logits give ln(classes)") {
    auto logits = Tensor::zeros({2, 7});
    std::vector<int> labels{3, 6};
    CHECK(cross_entropy(logits, labels).item() == doctest::Approx(std::log(7.0)).epsilon(1e-14));
    CHECK(std::log(7.0) == doctest::Approx(1.9459).epsilon(1e-4));
  }
  SUBCASE("loss shrinks monotonically as the margin grows on a wrong label") {
    double prev = 0.0;
    std::vector<int> labels{1};
    for (double margin = 0.5; margin < 40; margin *= 2) {
      auto logits = Tensor::from_data({1, 3}, {margin, 0.0, 0.0});
      const double l = cross_entropy(logits, labels).item();
      CHECK(l > prev);
      CHECK(l >= 0.0);
      prev = l;
    }
  }
  SUBCASE("random logits match per-sample enumeration") {
    Rng rng(3);
    auto logits = random_tensor(rng, {3, 4}, -2, 2, false);
    std::vector<int> labels{0, 3, 2};
    double expected = 0.0;
    for (int b = 0; b < 3; ++b) {
      double denom = 0.0;
      for (int c = 0; c < 4; ++c) denom += std::exp(logits.at({b, c}));
      expected += -std::log(std::exp(logits.at({b, labels[b]})) / denom);
    }
    expected /= 3.0;
    CHECK(cross_entropy(logits, labels).item() == doctest::Approx(expected).epsilon(1e-13));
  }
  SUBCASE("out-of-range label is rejected") {
    std::vector<int> labels{7};
    CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 7}), labels), std::out_of_range);
  }
}

TEST_CASE("errors name the offending shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4, 5});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 2), ShapeError);
}

TEST_CASE("non-finite inputs are rejected") {
  auto bad = Tensor::from_data({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(softmax(bad, 0), NumericError);
  CHECK_THROWS_AS(add(bad, Tensor::zeros({2})), NumericError);
  auto inf = Tensor::from_data({1, 2}, {std::numeric_limits<double>::infinity(), 0.0});
  std::vector<int> labels{0};
  CHECK_THROWS_AS(cross_entropy(inf, labels), NumericError);
}

TEST_CASE("backward basics") {
  SUBCASE("d(x^2)/dx at 3 is 6") {
    auto x = Tensor::scalar(3.0, true);
    backward(mul(x, x));
    CHECK(x.grad()[0] == 6.0);
  }
  SUBCASE("sum(W x) gradient has outer-product structure") {
    Rng rng(5);
    auto w = random_tensor(rng, {3, 4});
    auto x = random_tensor(rng, {4, 1}, -1, 1, false);
    backward(sum_all(matmul(w, x)));
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 4; ++j) CHECK(w.grad()[i * 4 + j] == doctest::Approx(x.data()[j]).epsilon(1e-14));
    }
    auto r = check_gradients([&](const std::vector<Tensor>& in) { return sum_all(matmul(in[0], x)); }, {w});
    CHECK(r.max_rel_error <= 1e-4);
  }
  SUBCASE("disconnected parameter receives zeros") {
    auto p = Tensor::from_data({2}, {1, 2}, true);
    auto q = Tensor::scalar(2.0, true);
    std::vector<Tensor> params{p, q};
    backward(mul(q, q), params);
    REQUIRE(p.has_grad());
    CHECK(p.grad()[0] == 0.0);
    CHECK(p.grad()[1] == 0.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    auto p = Tensor::from_data({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(scale(p, 2.0)), ShapeError);
  }
  SUBCASE("no tape under NoGradGuard") {
    auto p = Tensor::from_data({2}, {1, 2}, true);
    NoGradGuard guard;
    auto y = scale(p, 2.0);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.is_leaf());
  }
}

TEST_CASE("every primitive's backward matches central finite differences") {
  Rng rng(2024);
  std::uint64_t seed = 1;
  for (const auto& pc : primitive_cases()) {
    CAPTURE(pc.name);
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<Tensor> inputs;
      for (const auto& s : pc.shapes) inputs.push_back(random_tensor(rng, s, -1.5, 1.5));
      const auto proj_seed = seed++;
      auto r = check_gradients([&](const std::vector<Tensor>& in) { return project(pc.op(in), proj_seed); },
                               inputs);
      CAPTURE(r.worst);
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
  SUBCASE("cross_entropy") {
    for (int trial = 0; trial < 5; ++trial) {
      auto logits = random_tensor(rng, {4, 5}, -2, 2);
      std::vector<int> labels{0, 4, 2, 2};
      auto r = check_gradients([&](const std::vector<Tensor>& in) { return cross_entropy(in[0], labels); },
                               {logits});
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("chain composition matches finite differences end-to-end") {
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor(rng, {3, 4});
    auto w = random_tensor(rng, {5, 4});
    auto f = [](const std::vector<Tensor>& in) {
      return sum_all(softmax(gelu(linear(in[0], in[1], Tensor())), -1));
    };
    auto coeff = random_tensor(rng, {3, 5}, -1, 1, false);
    auto f2 = [&](const std::vector<Tensor>& in) {
      return sum_all(mul(layer_norm(matmul(in[0], transpose(in[1], 0, 1)), -1), coeff));
    };
    CHECK(check_gradients(f, {x, w}).max_rel_error <= 1e-4);
    CHECK(check_gradients(f2, {x, w}).max_rel_error <= 1e-4);
  }
}

TEST_CASE("tape replay is bit-identical") {
  Rng rng(1);
  auto w = random_tensor(rng, {4, 4});
  auto x = random_tensor(rng, {3, 4}, -1, 1, false);
  auto loss = sum_all(gelu(layer_norm(linear(x, w, Tensor()), -1)));
  w.zero_grad();
  backward(loss);
  std::vector<double> first(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(loss);
  std::vector<double> second(w.grad().begin(), w.grad().end());
  CHECK(first == second);
}

TEST_CASE("MAC counter sees matmul-family work") {
  auto a = Tensor::zeros({2, 3, 4});
  auto b = Tensor::zeros({4, 5});
  MacCounterScope scope;
  (void)matmul(a, b);
  (void)linear(a, Tensor::zeros({6, 4}), Tensor());
  CHECK(scope.count() == 2u * 3 * 5 * 4 + 2u * 3 * 6 * 4);
}

TEST_CASE("optimizer") {
  SUBCASE("zero grad and zero decay leave parameters unchanged") {
    for (auto kind : {OptimizerKind::kAdam, OptimizerKind::kAdamW}) {
      auto p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
      p.zero_grad();
      Optimizer opt({p}, {kind, 0.1, 0.9, 0.999, 1e-8, 0.0});
      opt.step();
      CHECK(p.data()[0] == 1.0);
      CHECK(p.data()[1] == -2.0);
      CHECK(p.data()[2] == 0.5);
    }
  }
  SUBCASE("single Adam step matches the bias-corrected recurrence") {
    auto p = Tensor::from_data({1}, {1.0}, true);
    p.zero_grad();
    p.mutable_grad()[0] = 1.0;
    Optimizer opt({p}, {OptimizerKind::kAdam, 0.1, 0.9, 0.999, 1e-8, 0.0});
    opt.step();
    const double m = (1 - 0.9) * 1.0, v = (1 - 0.999) * 1.0;
    const double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
    CHECK(p.data()[0] == doctest::Approx(1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-15));
    // Second step with the same gradient.
    opt.step();
    const double m2 = 0.9 * m + 0.1, v2 = 0.999 * v + 0.001;
    const double expected = 1.0 - 0.1 * mhat / (std::sqrt(vhat) + 1e-8) -
                            0.1 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.998001)) + 1e-8);
    CHECK(p.data()[0] == doctest::Approx(expected).epsilon(1e-14));
  }
  SUBCASE("AdamW decay-only step is w - lr*lambda*w") {
    auto p = Tensor::from_data({2}, {2.0, -4.0}, true);
    p.zero_grad();
    Optimizer opt({p}, {OptimizerKind::kAdamW, 0.01, 0.9, 0.999, 1e-8, 0.3});
    opt.step();
    CHECK(p.data()[0] == doctest::Approx(2.0 - 0.01 * 0.3 * 2.0).epsilon(1e-15));
    CHECK(p.data()[1] == doctest::Approx(-4.0 + 0.01 * 0.3 * 4.0).epsilon(1e-15));
  }
  SUBCASE("missing gradient is rejected") {
    auto p = Tensor::from_data({2}, {2.0, -4.0}, true);
    Optimizer opt({p}, {});
    CHECK_THROWS_AS(opt.step(), std::logic_error);
  }
  SUBCASE("cosine schedule with linear warmup") {
    LrSchedule s{ScheduleKind::kCosine, 110, 10, 0.033};
    CHECK(s.factor(0) == doctest::Approx(0.033));
    CHECK(s.factor(5) == doctest::Approx(0.033 + 0.967 * 0.5));
    CHECK(s.factor(10) == doctest::Approx(1.0));
    CHECK(s.factor(60) == doctest::Approx(0.5));
    CHECK(s.factor(110) == doctest::Approx(0.0));
    double prev = 2.0;
    for (int t = 10; t <= 110; ++t) {
      CHECK(s.factor(t) <= prev);
      prev = s.factor(t);
    }
    LrSchedule c{};
    CHECK(c.factor(12345) == 1.0);
  }
}
