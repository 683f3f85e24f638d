// Distillation and pre-training loops: teacher freezing, gradient
// accumulation, loss accounting, and reproducible logs.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/distill.hpp"

using namespace distillforge;

namespace {

EncoderConfig teacher_config() {
  EncoderConfig config;
  config.d = 2;
  config.a = 2;
  config.h = 16;
  config.i = 24;
  config.vocab_size = 30;
  config.max_positions = 8;
  return config;
}

EncoderConfig student_config() {
  EncoderConfig config = teacher_config();
  config.d = 1;
  return config;
}

/// Sequences with a learnable local pattern: three consecutive ids.
std::vector<std::vector<std::int32_t>> toy_corpus() {
  std::vector<std::vector<std::int32_t>> corpus;
  for (std::int32_t k = 5; k + 2 < 28; ++k) {
    corpus.push_back({kBosId, k, k + 1, k + 2, kEosId});
  }
  return corpus;
}

DistillConfig fast_config() {
  DistillConfig config;
  config.micro_batch = 8;
  config.epochs = 1;
  config.max_len = 8;
  config.learning_rate = 3e-3;
  config.mask_rate = 0.3;
  config.seed = 9;
  return config;
}

MaskedBatch hand_batch() {
  MaskedBatch batch;
  batch.inputs.batch = 2;
  batch.inputs.len = 5;
  batch.inputs.ids = {kBosId, kMaskId, 8, 9, kEosId, kBosId, 12, kMaskId, 14, kEosId};
  batch.labels.assign(10, kIgnoreLabel);
  batch.labels[1] = 7;
  batch.labels[7] = 13;
  batch.attention_mask.assign(10, 1);
  return batch;
}

double max_abs(const std::vector<float>& v) {
  double m = 0.0;
  for (const float x : v) m = std::max(m, std::abs(static_cast<double>(x)));
  return m;
}

}  // namespace

TEST_CASE("distillation never touches teacher parameters") {
  auto teacher = init_random<float>(teacher_config(), 3);
  auto student = init_student_from_teacher(teacher, student_config(), 4);

  std::vector<std::vector<float>> before;
  for (auto& [name, tensor] : teacher.named_parameters()) {
    (void)name;
    before.push_back(tensor->values());
  }

  distill_run(teacher, student, toy_corpus(), fast_config());

  auto params = teacher.named_parameters();
  REQUIRE(params.size() == before.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    CHECK(params[p].second->values() == before[p]);
    CHECK_FALSE(params[p].second->grad_defined());
  }
}

TEST_CASE("accumulated micro-batch gradients equal the single-step gradient") {
  // Two half-weighted passes over the same batch must add up to one full
  // pass; this is what makes accumulation_steps a pure memory knob.
  auto teacher = init_random<float>(teacher_config(), 5);
  auto student = init_student_from_teacher(teacher, student_config(), 6);
  const MaskedBatch batch = hand_batch();
  Rng rng(1);  // dropout is off, never drawn from

  DistillConfig single = fast_config();
  single.accumulation_steps = 1;
  distill_step(teacher, student, batch, single, rng);
  std::vector<std::vector<float>> expected;
  for (auto& [name, tensor] : student.named_parameters()) {
    (void)name;
    expected.push_back(tensor->grad());
    tensor->zero_grad();
  }

  DistillConfig split = fast_config();
  split.accumulation_steps = 2;
  const LossBreakdown first = distill_step(teacher, student, batch, split, rng);
  const LossBreakdown second = distill_step(teacher, student, batch, split, rng);
  CHECK(first.total == second.total);  // loss values are reported unscaled

  auto params = student.named_parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::vector<float>& got = params[p].second->grad();
    REQUIRE(got.size() == expected[p].size());
    const double tol = 1e-6 + 1e-4 * max_abs(expected[p]);
    double worst = 0.0;
    for (std::size_t j = 0; j < got.size(); ++j) {
      worst = std::max(worst, std::abs(static_cast<double>(got[j]) - expected[p][j]));
    }
    INFO("parameter " << params[p].first);
    CHECK(worst <= tol);
  }
}

TEST_CASE("distillation loss falls over a short run") {
  // Repeated-token sequences: a masked interior token is recoverable from its
  // neighbours, so both the teacher signal and the MLM part are learnable.
  std::vector<std::vector<std::int32_t>> corpus;
  for (std::int32_t t = 5; t < 28; ++t) corpus.push_back({kBosId, t, t, t, kEosId});

  // A raw random teacher emits near-uniform logits whose entropy floor hides
  // any progress in the distillation term, so warm the teacher up first.
  auto teacher = init_random<float>(teacher_config(), 7);
  DistillConfig warmup = fast_config();
  warmup.epochs = 60;
  warmup.mask_rate = 0.4;
  warmup.seed = 11;
  pretrain_run(teacher, corpus, warmup);

  auto student = init_student_from_teacher(teacher, student_config(), 8);
  DistillConfig config = fast_config();
  config.epochs = 60;
  config.mask_rate = 0.4;
  const DistillRunResult result = distill_run(teacher, student, corpus, config);

  REQUIRE(result.epoch_losses.size() == 60);
  CHECK(result.epoch_losses.back().total < result.epoch_losses.front().total);

  // The reported total is the weighted sum of the three parts.
  for (const LossBreakdown& step : result.step_losses) {
    const double recomputed = config.alpha_ce * step.l_ce + config.alpha_mlm * step.l_mlm +
                              config.alpha_cos * step.l_cos;
    CHECK_THAT(step.total, Catch::Matchers::WithinRel(recomputed, 1e-4));
  }
}

TEST_CASE("training logs are reproducible and one json object per step") {
  auto teacher = init_random<float>(teacher_config(), 9);

  auto run_once = [&](std::ostream& log) {
    auto student = init_student_from_teacher(teacher, student_config(), 10);
    DistillConfig config = fast_config();
    config.epochs = 2;
    return distill_run(teacher, student, toy_corpus(), config, &log);
  };

  std::ostringstream log_a;
  std::ostringstream log_b;
  const DistillRunResult result = run_once(log_a);
  run_once(log_b);
  CHECK(log_a.str() == log_b.str());
  CHECK_FALSE(log_a.str().empty());

  std::istringstream lines(log_a.str());
  std::string line;
  std::size_t step = 0;
  while (std::getline(lines, line)) {
    const nlohmann::json parsed = nlohmann::json::parse(line);
    ++step;
    CHECK(parsed.at("step").get<std::size_t>() == step);
    CHECK(parsed.at("learning_rate").get<double>() > 0.0);
    CHECK(parsed.contains("l_ce"));
    CHECK(parsed.contains("l_mlm"));
    CHECK(parsed.contains("l_cos"));
    CHECK(parsed.contains("total"));
  }
  CHECK(step == result.optimizer_steps);
}

TEST_CASE("step accounting flushes the trailing partial window") {
  // 10 sequences at micro_batch 4 give 3 micro-batches per epoch; with
  // accumulation 2 that is one full window plus a flushed partial one.
  auto model = init_random<float>(student_config(), 11);
  std::vector<std::vector<std::int32_t>> corpus = toy_corpus();
  corpus.resize(10);

  DistillConfig config = fast_config();
  config.micro_batch = 4;
  config.accumulation_steps = 2;
  config.epochs = 3;
  const DistillRunResult result = pretrain_run(model, corpus, config);

  CHECK(result.optimizer_steps == 6);
  CHECK(result.step_losses.size() == 6);
  CHECK(result.epoch_losses.size() == 3);
}

TEST_CASE("pretraining reports only the mlm loss and improves") {
  auto model = init_random<float>(student_config(), 12);
  DistillConfig config = fast_config();
  config.epochs = 6;
  const DistillRunResult result = pretrain_run(model, toy_corpus(), config);

  for (const LossBreakdown& step : result.step_losses) {
    CHECK(step.l_ce == 0.0);
    CHECK(step.l_cos == 0.0);
    CHECK(step.total == step.l_mlm);
    CHECK(step.l_mlm > 0.0);
  }
  CHECK(result.epoch_losses.back().total < result.epoch_losses.front().total);
}

TEST_CASE("distillation rejects invalid configurations") {
  auto teacher = init_random<float>(teacher_config(), 13);
  auto student = init_student_from_teacher(teacher, student_config(), 14);
  const auto corpus = toy_corpus();

  auto expect_config_error = [&](DistillConfig c) {
    try {
      distill_run(teacher, student, corpus, c);
      FAIL("expected a config error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::config);
    }
  };

  DistillConfig c = fast_config();
  c.temperature = 0.0;
  expect_config_error(c);
  c = fast_config();
  c.alpha_ce = -1.0;
  expect_config_error(c);
  c = fast_config();
  c.alpha_ce = c.alpha_mlm = c.alpha_cos = 0.0;
  expect_config_error(c);
  c = fast_config();
  c.mask_rate = 1.0;
  expect_config_error(c);
  c = fast_config();
  c.micro_batch = 0;
  expect_config_error(c);
  c = fast_config();
  c.accumulation_steps = 0;
  expect_config_error(c);
  c = fast_config();
  c.max_len = 1;
  expect_config_error(c);
  c = fast_config();
  c.schedule = "cosine";
  expect_config_error(c);
  c = fast_config();
  c.learning_rate = 0.0;
  expect_config_error(c);

  try {
    distill_run(teacher, student, {}, fast_config());
    FAIL("expected empty corpus to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_argument);
  }
}

TEST_CASE("mismatched teacher and student shapes are config errors") {
  auto teacher = init_random<float>(teacher_config(), 15);
  const auto corpus = toy_corpus();

  EncoderConfig wide = student_config();
  wide.h = 32;
  wide.i = 48;
  auto wide_student = init_random<float>(wide, 16);
  try {
    distill_run(teacher, wide_student, corpus, fast_config());
    FAIL("expected hidden size mismatch to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }

  EncoderConfig other_vocab = student_config();
  other_vocab.vocab_size = 40;
  auto other_student = init_random<float>(other_vocab, 17);
  try {
    distill_run(teacher, other_student, corpus, fast_config());
    FAIL("expected vocabulary mismatch to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::config);
  }
}

TEST_CASE("a batch with no masked labels is rejected outright") {
  auto teacher = init_random<float>(teacher_config(), 18);
  auto student = init_student_from_teacher(teacher, student_config(), 19);
  MaskedBatch batch = hand_batch();
  batch.labels.assign(batch.labels.size(), kIgnoreLabel);
  Rng rng(1);
  try {
    distill_step(teacher, student, batch, fast_config(), rng);
    FAIL("expected distill_step to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_argument);
  }
}
