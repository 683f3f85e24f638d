// AdamW, gradient clipping, and learning-rate schedules checked against
// independently coded references.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "distillforge/optimizer.hpp"
#include "distillforge/tensor.hpp"

using namespace distillforge;

namespace {

using DTensor = TensorT<double>;

/// Scalar reference for one AdamW trajectory, written straight from the
/// update rule in long double.
struct ScalarAdamRef {
  long double m = 0.0L;
  long double v = 0.0L;
  long double w;
  int t = 0;

  explicit ScalarAdamRef(double w0) : w(w0) {}

  void step(double g, const AdamWConfig& c) {
    ++t;
    m = c.beta1 * m + (1.0L - c.beta1) * g;
    v = c.beta2 * v + (1.0L - c.beta2) * static_cast<long double>(g) * g;
    const long double mhat = m / (1.0L - std::pow(static_cast<long double>(c.beta1), t));
    const long double vhat = v / (1.0L - std::pow(static_cast<long double>(c.beta2), t));
    w -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * w);
  }
};

}  // namespace

TEST_CASE("adamw first step matches the closed form") {
  // At t=1 the bias corrections cancel the decay factors exactly, so the
  // update reduces to g / (|g| + eps) plus the decoupled decay term.
  AdamWConfig config;
  config.lr = 0.1;
  config.weight_decay = 0.01;
  DTensor w = DTensor::from_data({3}, {1.0, -2.0, 0.5});
  w.grad() = {0.3, -0.2, 0.0};

  AdamWT<double> opt({&w}, config);
  opt.step();

  const std::vector<double> w0 = {1.0, -2.0, 0.5};
  const std::vector<double> g = {0.3, -0.2, 0.0};
  for (std::size_t j = 0; j < 3; ++j) {
    const double update = g[j] / (std::abs(g[j]) + config.eps) + config.weight_decay * w0[j];
    CHECK_THAT(w.values()[j],
               Catch::Matchers::WithinAbs(w0[j] - config.lr * update, 1e-12));
  }
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("adamw tracks a scalar reference over many steps") {
  AdamWConfig config;
  config.lr = 0.05;
  config.weight_decay = 0.02;
  DTensor w = DTensor::from_data({1}, {0.7});
  AdamWT<double> opt({&w}, config);
  ScalarAdamRef ref(0.7);

  for (int t = 1; t <= 40; ++t) {
    const double g = std::sin(0.3 * t) + 0.1;
    w.zero_grad();
    w.grad()[0] = g;
    opt.step();
    ref.step(g, config);
    REQUIRE_THAT(w.values()[0],
                 Catch::Matchers::WithinAbs(static_cast<double>(ref.w), 1e-12));
  }
  CHECK(opt.steps_taken() == 40);
}

TEST_CASE("weight decay is decoupled from the gradient") {
  // A zero gradient still decays the weight multiplicatively; coupled L2
  // regularisation would instead push the decay through the Adam moments.
  AdamWConfig config;
  config.lr = 0.5;
  config.weight_decay = 0.1;
  DTensor w = DTensor::from_data({1}, {2.0});
  w.grad();  // all-zero but defined
  AdamWT<double> opt({&w}, config);
  opt.step();
  CHECK_THAT(w.values()[0], Catch::Matchers::WithinAbs(2.0 * (1.0 - 0.5 * 0.1), 1e-12));
}

TEST_CASE("parameters without gradients are left untouched") {
  AdamWConfig config;
  config.weight_decay = 0.5;
  DTensor touched = DTensor::from_data({1}, {1.0});
  DTensor frozen = DTensor::from_data({1}, {1.0});
  touched.grad()[0] = 1.0;
  AdamWT<double> opt({&touched, &frozen}, config);
  opt.step();
  CHECK(touched.values()[0] != 1.0);
  CHECK(frozen.values()[0] == 1.0);
}

TEST_CASE("zero_grad clears every registered parameter") {
  DTensor a = DTensor::from_data({2}, {1.0, 2.0});
  DTensor b = DTensor::from_data({2}, {3.0, 4.0});
  a.grad()[0] = 1.0;
  b.grad()[1] = 2.0;
  AdamWT<double> opt({&a, &b}, AdamWConfig{});
  opt.zero_grad();
  CHECK_FALSE(a.grad_defined());
  CHECK_FALSE(b.grad_defined());
}

TEST_CASE("adamw rejects bad hyperparameters") {
  DTensor w = DTensor::from_data({1}, {0.0});
  auto expect_invalid = [&](AdamWConfig c) {
    try {
      AdamWT<double> opt({&w}, c);
      FAIL("expected constructor to throw");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::invalid_argument);
    }
  };
  AdamWConfig c;
  c.lr = 0.0;
  expect_invalid(c);
  c = AdamWConfig{};
  c.beta1 = 1.0;
  expect_invalid(c);
  c = AdamWConfig{};
  c.beta2 = -0.1;
  expect_invalid(c);
  c = AdamWConfig{};
  c.eps = 0.0;
  expect_invalid(c);
  c = AdamWConfig{};
  c.weight_decay = -1e-9;
  expect_invalid(c);

  AdamWT<double> opt({&w}, AdamWConfig{});
  CHECK_THROWS_AS(opt.set_lr(-1.0), Error);
  opt.set_lr(0.25);
  CHECK(opt.lr() == 0.25);
}

TEST_CASE("clip_global_norm scales only when over the limit") {
  DTensor a = DTensor::from_data({2}, {0.0, 0.0});
  DTensor b = DTensor::from_data({1}, {0.0});
  DTensor no_grad = DTensor::from_data({1}, {0.0});
  a.grad() = {3.0, 0.0};
  b.grad() = {4.0};

  SECTION("over the limit the norm shrinks to max_norm") {
    const double before = clip_global_norm<double>({&a, &b, &no_grad}, 1.0);
    CHECK_THAT(before, Catch::Matchers::WithinAbs(5.0, 1e-12));
    CHECK_THAT(a.grad()[0], Catch::Matchers::WithinAbs(0.6, 1e-12));
    CHECK_THAT(b.grad()[0], Catch::Matchers::WithinAbs(0.8, 1e-12));
    CHECK_FALSE(no_grad.grad_defined());
  }

  SECTION("under the limit gradients pass through unchanged") {
    const double before = clip_global_norm<double>({&a, &b}, 10.0);
    CHECK_THAT(before, Catch::Matchers::WithinAbs(5.0, 1e-12));
    CHECK(a.grad()[0] == 3.0);
    CHECK(b.grad()[0] == 4.0);
  }

  SECTION("max_norm must be positive") {
    CHECK_THROWS_AS(clip_global_norm<double>({&a}, 0.0), Error);
  }
}

TEST_CASE("constant schedule never changes") {
  const LrSchedule s = LrSchedule::constant(3e-4);
  CHECK(s.at(1) == 3e-4);
  CHECK(s.at(123456) == 3e-4);
}

TEST_CASE("linear schedule ramps up then decays to zero") {
  const double base = 1e-3;
  const LrSchedule s = LrSchedule::linear(base, 4, 10);

  // Warmup: proportional climb that reaches base at the last warmup step.
  CHECK_THAT(s.at(1), Catch::Matchers::WithinAbs(base * 0.25, 1e-15));
  CHECK_THAT(s.at(2), Catch::Matchers::WithinAbs(base * 0.5, 1e-15));
  CHECK_THAT(s.at(4), Catch::Matchers::WithinAbs(base, 1e-15));

  // First decay step still runs at full base, then six steps shrink linearly.
  CHECK_THAT(s.at(5), Catch::Matchers::WithinAbs(base, 1e-15));
  CHECK_THAT(s.at(6), Catch::Matchers::WithinAbs(base * 5.0 / 6.0, 1e-15));
  CHECK_THAT(s.at(10), Catch::Matchers::WithinAbs(base * 1.0 / 6.0, 1e-15));

  // Past the horizon the rate freezes at the final value.
  CHECK(s.at(11) == s.at(10));
  CHECK(s.at(10000) == s.at(10));
}

TEST_CASE("linear schedule without warmup starts at full rate") {
  const LrSchedule s = LrSchedule::linear(2e-4, 0, 5);
  CHECK_THAT(s.at(1), Catch::Matchers::WithinAbs(2e-4, 1e-15));
  CHECK_THAT(s.at(5), Catch::Matchers::WithinAbs(2e-4 / 5.0, 1e-15));
}

TEST_CASE("all-warmup schedule drops to zero after the ramp") {
  const LrSchedule s = LrSchedule::linear(1e-3, 5, 5);
  CHECK_THAT(s.at(5), Catch::Matchers::WithinAbs(1e-3, 1e-15));
  CHECK(s.at(6) == 0.0);
}

TEST_CASE("schedules are constructed by name") {
  CHECK(LrSchedule::named("constant", 1e-4, 0, 0).at(99) == 1e-4);
  CHECK_THAT(LrSchedule::named("linear", 1e-4, 2, 4).at(1),
             Catch::Matchers::WithinAbs(5e-5, 1e-15));
  try {
    LrSchedule::named("cosine", 1e-4, 0, 10);
    FAIL("expected unknown schedule to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

TEST_CASE("linear schedule validates its horizon") {
  CHECK_THROWS_AS(LrSchedule::linear(1e-4, 0, 0), Error);
  CHECK_THROWS_AS(LrSchedule::linear(1e-4, 11, 10), Error);
}
