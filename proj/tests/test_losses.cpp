// Loss functions against independent references: long-double softmax oracle,
// closed-form identities, and small grid searches over the probability
// simplex.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "distillforge/grad_check.hpp"
#include "distillforge/losses.hpp"

#include "test_support.hpp"

using namespace distillforge;

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

namespace {

double oracle_cross_entropy(const std::vector<double>& logits_row, std::int32_t label) {
  const auto p = testsupport::softmax_reference(logits_row, 1.0);
  return -std::log(p[static_cast<std::size_t>(label)]);
}

}  // namespace

TEST_CASE("softmax_cross_entropy matches a long double oracle") {
  Rng rng(300);
  const std::size_t rows = 6, k = 5;
  auto logits = DTensor::randn({rows, k}, rng, 2.0);
  const std::vector<std::int32_t> labels = {0, 4, kIgnoreLabel, 2, kIgnoreLabel, 1};

  double expected = 0.0;
  std::size_t active = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] == kIgnoreLabel) continue;
    std::vector<double> row(logits.values().begin() + r * k,
                            logits.values().begin() + (r + 1) * k);
    expected += oracle_cross_entropy(row, labels[r]);
    ++active;
  }
  expected /= static_cast<double>(active);

  auto loss = softmax_cross_entropy<double>(nullptr, logits, labels);
  CHECK(loss.item() == Catch::Approx(expected).margin(1e-12));
}

TEST_CASE("softmax_cross_entropy gradient matches finite differences") {
  Rng rng(301);
  auto logits = DTensor::randn({4, 6}, rng, 1.5);
  const std::vector<std::int32_t> labels = {3, kIgnoreLabel, 0, 5};
  auto f = [&](DTape& tape) { return softmax_cross_entropy(&tape, logits, labels); };
  auto r = finite_difference_check<double>(f, logits, 1e-5);
  CHECK(r.max_rel_error < 1e-6);

  // Ignored rows must receive exactly zero gradient.
  for (std::size_t j = 0; j < 6; ++j) CHECK(logits.grad()[1 * 6 + j] == 0.0);
}

TEST_CASE("softmax_cross_entropy rejects bad labels") {
  auto logits = DTensor::zeros({2, 3});
  CHECK_THROWS_AS(softmax_cross_entropy<double>(nullptr, logits, {0}), Error);
  CHECK_THROWS_AS(softmax_cross_entropy<double>(nullptr, logits, {3, 0}), Error);
  CHECK_THROWS_AS(softmax_cross_entropy<double>(nullptr, logits, {-2, 0}), Error);
  CHECK_THROWS_AS(
      softmax_cross_entropy<double>(nullptr, logits, {kIgnoreLabel, kIgnoreLabel}), Error);
}

TEST_CASE("distillation loss equals temperature-scaled teacher entropy at the optimum") {
  Rng rng(302);
  auto teacher = DTensor::randn({3, 4}, rng, 1.0);
  auto student = DTensor::from_data(teacher.shape(), teacher.values());

  for (double t : {1.0, 2.0, 4.0}) {
    double expected = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
      std::vector<double> row(teacher.values().begin() + r * 4,
                              teacher.values().begin() + (r + 1) * 4);
      const auto p = testsupport::softmax_reference(row, t);
      for (double pi : p) expected -= pi * std::log(pi);
    }
    expected *= t * t / 3.0;
    auto loss = distillation_ce_loss<double>(nullptr, teacher, student, t);
    CHECK(loss.item() == Catch::Approx(expected).margin(1e-10));
  }
}

TEST_CASE("matching the teacher minimizes the distillation loss") {
  // Perturb the student in several random directions; the loss must not
  // decrease, since cross-entropy is minimized at q == p.
  Rng rng(303);
  auto teacher = DTensor::randn({2, 5}, rng, 1.2);
  auto at_optimum = distillation_ce_loss<double>(nullptr, teacher,
                                                 DTensor::from_data(teacher.shape(),
                                                                    teacher.values()),
                                                 2.0);
  for (int trial = 0; trial < 10; ++trial) {
    auto perturbed = DTensor::from_data(teacher.shape(), teacher.values());
    for (auto& v : perturbed.values()) v += normal_sample(rng, 0.0, 0.3);
    auto loss = distillation_ce_loss<double>(nullptr, teacher, perturbed, 2.0);
    CHECK(loss.item() >= at_optimum.item() - 1e-12);
  }
}

TEST_CASE("distillation loss approaches T^2 log K at high temperature") {
  Rng rng(304);
  auto teacher = DTensor::randn({2, 4}, rng, 1.0);
  auto student = DTensor::randn({2, 4}, rng, 1.0);
  const double t = 1000.0;
  auto loss = distillation_ce_loss<double>(nullptr, teacher, student, t);
  CHECK(loss.item() / (t * t) == Catch::Approx(std::log(4.0)).margin(1e-4));
}

TEST_CASE("distillation gradient matches finite differences and spares the teacher") {
  Rng rng(305);
  auto teacher = DTensor::randn({4, 5}, rng, 1.0);
  auto student = DTensor::randn({4, 5}, rng, 1.0);
  teacher.set_requires_grad(true);
  const std::vector<std::uint8_t> active = {1, 0, 1, 1};

  auto f = [&](DTape& tape) {
    return distillation_ce_loss(&tape, teacher, student, 2.0, active);
  };
  auto r = finite_difference_check<double>(f, student, 1e-5);
  CHECK(r.max_rel_error < 1e-6);

  // Inactive rows receive zero gradient.
  for (std::size_t j = 0; j < 5; ++j) CHECK(student.grad()[1 * 5 + j] == 0.0);
  // The teacher is a constant input; nothing flows back into it.
  CHECK_FALSE(teacher.grad_defined());
}

TEST_CASE("distillation loss input validation") {
  auto a = DTensor::zeros({2, 3});
  auto b = DTensor::zeros({2, 4});
  CHECK_THROWS_AS(distillation_ce_loss<double>(nullptr, a, b, 2.0), Error);
  auto c = DTensor::zeros({2, 3});
  CHECK_THROWS_AS(distillation_ce_loss<double>(nullptr, a, c, 0.0), Error);
  CHECK_THROWS_AS(distillation_ce_loss<double>(nullptr, a, c, 2.0, {0, 0}), Error);
  CHECK_THROWS_AS(distillation_ce_loss<double>(nullptr, a, c, 2.0, {1, 1, 1}), Error);
}

TEST_CASE("cosine alignment loss hits its closed-form anchor points") {
  auto u = DTensor::from_data({3, 2}, {1.0, 0.0, 0.0, 2.0, 1.0, 1.0});

  auto same = DTensor::from_data({3, 2}, {2.0, 0.0, 0.0, 1.0, 3.0, 3.0});
  CHECK(cosine_alignment_loss<double>(nullptr, u, same).item() ==
        Catch::Approx(0.0).margin(1e-12));

  auto opposite = DTensor::from_data({3, 2}, {-1.0, 0.0, 0.0, -5.0, -2.0, -2.0});
  CHECK(cosine_alignment_loss<double>(nullptr, u, opposite).item() ==
        Catch::Approx(2.0).margin(1e-12));

  auto orthogonal = DTensor::from_data({3, 2}, {0.0, 1.0, 3.0, 0.0, 1.0, -1.0});
  CHECK(cosine_alignment_loss<double>(nullptr, u, orthogonal).item() ==
        Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("cosine alignment loss respects the active row mask") {
  auto ref = DTensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
  auto student = DTensor::from_data({2, 2}, {1.0, 0.0, 1.0, 0.0});
  // Row 0 aligned, row 1 orthogonal. Only row 1 active: loss = 1.
  auto loss = cosine_alignment_loss<double>(nullptr, ref, student, {0, 1});
  CHECK(loss.item() == Catch::Approx(1.0).margin(1e-12));
  CHECK_THROWS_AS(cosine_alignment_loss<double>(nullptr, ref, student, {0, 0}), Error);
}

TEST_CASE("cosine alignment gradient matches finite differences") {
  Rng rng(306);
  auto ref = DTensor::randn({5, 4}, rng, 1.0);
  auto student = DTensor::randn({5, 4}, rng, 1.0);
  ref.set_requires_grad(true);
  const std::vector<std::uint8_t> active = {1, 1, 0, 1, 1};

  auto f = [&](DTape& tape) {
    return cosine_alignment_loss(&tape, ref, student, active);
  };
  auto r = finite_difference_check<double>(f, student, 1e-6);
  CHECK(r.max_rel_error < 1e-5);
  CHECK_FALSE(ref.grad_defined());
}

TEST_CASE("log_softmax_at matches the oracle") {
  Rng rng(307);
  auto logits = DTensor::randn({2, 6}, rng, 3.0);
  for (std::size_t r = 0; r < 2; ++r) {
    std::vector<double> row(logits.values().begin() + r * 6,
                            logits.values().begin() + (r + 1) * 6);
    const auto p = testsupport::softmax_reference(row, 1.0);
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(log_softmax_at(logits, r, j) == Catch::Approx(std::log(p[j])).margin(1e-10));
    }
  }
}
