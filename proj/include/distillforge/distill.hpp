#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/common.hpp"
#include "distillforge/corpus.hpp"
#include "distillforge/encoder.hpp"
#include "distillforge/losses.hpp"
#include "distillforge/masking.hpp"
#include "distillforge/optimizer.hpp"

namespace distillforge {

struct DistillConfig {
  double temperature = 2.0;
  double alpha_ce = 5.0;
  double alpha_mlm = 2.0;
  double alpha_cos = 1.0;
  double mask_rate = 0.15;
  double mask_fraction = 0.8;
  double random_fraction = 0.1;
  std::size_t micro_batch = 8;
  std::size_t accumulation_steps = 1;
  std::size_t epochs = 1;
  std::size_t max_len = 64;
  double learning_rate = 5e-4;
  std::string schedule = "constant";
  std::uint64_t seed = 1;

  void validate() const {
    if (temperature <= 0.0) {
      fail(ErrorKind::config, "temperature must be positive, got " +
                                  std::to_string(temperature));
    }
    if (alpha_ce < 0.0 || alpha_mlm < 0.0 || alpha_cos < 0.0) {
      fail(ErrorKind::config, "loss weights must be non-negative");
    }
    if (alpha_ce + alpha_mlm + alpha_cos <= 0.0) {
      fail(ErrorKind::config, "at least one loss weight must be positive");
    }
    if (mask_rate <= 0.0 || mask_rate >= 1.0) {
      fail(ErrorKind::config, "mask rate must lie in (0, 1)");
    }
    if (micro_batch < 1 || accumulation_steps < 1 || max_len < 2) {
      fail(ErrorKind::config, "micro_batch, accumulation_steps and max_len must be positive"
                              " (max_len at least 2)");
    }
    if (schedule != "constant" && schedule != "linear") {
      fail(ErrorKind::config, "unknown schedule \"" + schedule + "\"");
    }
    if (learning_rate <= 0.0) {
      fail(ErrorKind::config, "learning rate must be positive");
    }
  }

  std::size_t effective_batch() const { return micro_batch * accumulation_steps; }

  MaskingPolicy masking_policy(std::size_t vocab_size) const {
    return MaskingPolicy{mask_rate, mask_fraction, random_fraction, vocab_size};
  }
};

struct LossBreakdown {
  double l_ce = 0.0;
  double l_mlm = 0.0;
  double l_cos = 0.0;
  double total = 0.0;
};

/// One JSON object per optimizer step.
inline void log_training_step(std::ostream* log, std::size_t step,
                              const LossBreakdown& mean, double learning_rate) {
  if (log == nullptr) return;
  nlohmann::json line{{"step", step},
                      {"l_ce", mean.l_ce},
                      {"l_mlm", mean.l_mlm},
                      {"l_cos", mean.l_cos},
                      {"total", mean.total},
                      {"learning_rate", learning_rate}};
  *log << line.dump() << '\n';
}

struct DistillRunResult {
  /// Mean loss per epoch.
  std::vector<LossBreakdown> epoch_losses;
  /// Mean loss per optimizer step, across the whole run.
  std::vector<LossBreakdown> step_losses;
  std::size_t optimizer_steps = 0;
};

namespace detail {

template <typename S>
std::vector<TensorT<S>*> trainable_parameters(EncoderModelT<S>& model) {
  std::vector<TensorT<S>*> out;
  for (auto& [name, tensor] : model.named_parameters()) {
    (void)name;
    out.push_back(tensor);
  }
  return out;
}

inline std::vector<std::uint8_t> label_rows(const MaskedBatch& batch) {
  std::vector<std::uint8_t> rows(batch.labels.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i] = batch.labels[i] != kIgnoreLabel ? 1 : 0;
  }
  return rows;
}

inline LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& window) {
  LossBreakdown mean;
  if (window.empty()) return mean;
  for (const auto& b : window) {
    mean.l_ce += b.l_ce;
    mean.l_mlm += b.l_mlm;
    mean.l_cos += b.l_cos;
    mean.total += b.total;
  }
  const double n = static_cast<double>(window.size());
  mean.l_ce /= n;
  mean.l_mlm /= n;
  mean.l_cos /= n;
  mean.total /= n;
  return mean;
}

/// Shared epoch driver: shuffles, batches, masks, calls step_fn per
/// micro-batch, and takes one optimizer step per accumulation window. The
/// final partial window of an epoch still steps. step_fn(batch, rng) must
/// accumulate gradients and return the unscaled loss values.
template <typename S, typename StepFn>
DistillRunResult run_training_epochs(const std::vector<std::vector<std::int32_t>>& corpus,
                                     const DistillConfig& config,
                                     std::vector<TensorT<S>*> params,
                                     std::size_t vocab_size, StepFn&& step_fn,
                                     std::ostream* log) {
  config.validate();
  if (corpus.empty()) {
    fail(ErrorKind::invalid_argument, "training run: empty corpus");
  }

  Rng rng(config.seed);
  const MaskingPolicy policy = config.masking_policy(vocab_size);
  AdamWConfig adam;
  adam.lr = config.learning_rate;
  AdamWT<S> optimizer(std::move(params), adam);
  const std::size_t batches_per_epoch =
      (corpus.size() + config.micro_batch - 1) / config.micro_batch;
  const std::size_t windows_per_epoch =
      (batches_per_epoch + config.accumulation_steps - 1) / config.accumulation_steps;
  const std::size_t total_steps = std::max<std::size_t>(1, windows_per_epoch * config.epochs);
  const LrSchedule schedule =
      LrSchedule::named(config.schedule, config.learning_rate, 0, total_steps);

  DistillRunResult result;
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    order = shuffle_records(std::move(order), rng());
    std::vector<LossBreakdown> epoch_window;
    std::vector<LossBreakdown> accum_window;
    std::size_t micro_in_window = 0;
    auto flush = [&]() {
      if (micro_in_window == 0) return;
      optimizer.set_lr(schedule.at(optimizer.steps_taken() + 1));
      optimizer.step();
      optimizer.zero_grad();
      ++result.optimizer_steps;
      const LossBreakdown mean = mean_breakdown(accum_window);
      result.step_losses.push_back(mean);
      log_training_step(log, result.optimizer_steps, mean, optimizer.lr());
      accum_window.clear();
      micro_in_window = 0;
    };

    for (std::size_t start = 0; start < order.size(); start += config.micro_batch) {
      const std::size_t end = std::min(order.size(), start + config.micro_batch);
      std::vector<std::vector<std::int32_t>> slice;
      slice.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) slice.push_back(corpus[order[i]]);
      auto [ids, attention] = make_padded_batch(slice, config.max_len);
      const MaskedBatch batch = apply_masking(ids, attention, policy, rng);
      const LossBreakdown breakdown = step_fn(batch, rng);
      epoch_window.push_back(breakdown);
      accum_window.push_back(breakdown);
      if (++micro_in_window == config.accumulation_steps) flush();
    }
    flush();
    result.epoch_losses.push_back(mean_breakdown(epoch_window));
  }
  return result;
}

}  // namespace detail

/// One micro-batch: forwards teacher (no graph) and student (graph), forms
/// the weighted loss, and accumulates gradients scaled by
/// 1/accumulation_steps so a full window sums to the mean update. Returns
/// the unscaled loss values.
template <typename S>
LossBreakdown distill_step(const EncoderModelT<S>& teacher, EncoderModelT<S>& student,
                           const MaskedBatch& batch, const DistillConfig& config,
                           Rng& dropout_rng) {
  config.validate();
  if (batch.label_count() == 0) {
    fail(ErrorKind::invalid_argument, "distill_step: batch has no masked positions");
  }

  ForwardOptionsT<S> teacher_options;
  ForwardResultT<S> teacher_out =
      forward(teacher, batch.inputs, batch.attention_mask, teacher_options);
  TensorT<S> teacher_logits = mlm_logits(teacher, teacher_out.final_hidden());

  TapeT<S> tape;
  ForwardOptionsT<S> student_options;
  student_options.train = true;
  student_options.rng = &dropout_rng;
  student_options.tape = &tape;
  ForwardResultT<S> student_out =
      forward(student, batch.inputs, batch.attention_mask, student_options);
  TensorT<S> student_logits = mlm_logits(student, student_out.final_hidden(), &tape);

  const std::vector<std::uint8_t> masked_rows = detail::label_rows(batch);
  TensorT<S> l_ce = distillation_ce_loss(&tape, teacher_logits, student_logits,
                                         config.temperature, masked_rows);
  TensorT<S> l_mlm = softmax_cross_entropy(&tape, student_logits, batch.labels);
  TensorT<S> l_cos = cosine_alignment_loss(&tape, teacher_out.final_hidden(),
                                           student_out.final_hidden(),
                                           batch.attention_mask);

  TensorT<S> total = add(&tape, scale(&tape, l_ce, static_cast<S>(config.alpha_ce)),
                         add(&tape, scale(&tape, l_mlm, static_cast<S>(config.alpha_mlm)),
                             scale(&tape, l_cos, static_cast<S>(config.alpha_cos))));
  TensorT<S> objective = scale(
      &tape, total, static_cast<S>(1.0 / static_cast<double>(config.accumulation_steps)));
  tape.backward(objective);

  LossBreakdown breakdown;
  breakdown.l_ce = static_cast<double>(l_ce.item());
  breakdown.l_mlm = static_cast<double>(l_mlm.item());
  breakdown.l_cos = static_cast<double>(l_cos.item());
  breakdown.total = static_cast<double>(total.item());
  return breakdown;
}

/// Distills `student` against the frozen `teacher` over an encoded corpus.
/// The teacher is never recorded on a tape, so its parameters cannot change.
template <typename S>
DistillRunResult distill_run(const EncoderModelT<S>& teacher, EncoderModelT<S>& student,
                             const std::vector<std::vector<std::int32_t>>& corpus,
                             const DistillConfig& config, std::ostream* log = nullptr) {
  if (teacher.config.h != student.config.h) {
    fail(ErrorKind::config, "teacher and student hidden sizes differ");
  }
  if (teacher.config.vocab_size != student.config.vocab_size) {
    fail(ErrorKind::config, "teacher and student vocabulary sizes differ");
  }
  return detail::run_training_epochs<S>(
      corpus, config, detail::trainable_parameters(student), student.config.vocab_size,
      [&](const MaskedBatch& batch, Rng& rng) {
        return distill_step(teacher, student, batch, config, rng);
      },
      log);
}

/// Plain MLM pre-training; the same loop with only the MLM loss and no
/// teacher.
template <typename S>
DistillRunResult pretrain_run(EncoderModelT<S>& model,
                              const std::vector<std::vector<std::int32_t>>& corpus,
                              const DistillConfig& config, std::ostream* log = nullptr) {
  return detail::run_training_epochs<S>(
      corpus, config, detail::trainable_parameters(model), model.config.vocab_size,
      [&](const MaskedBatch& batch, Rng& rng) {
        TapeT<S> tape;
        ForwardOptionsT<S> options;
        options.train = true;
        options.rng = &rng;
        options.tape = &tape;
        ForwardResultT<S> out = forward(model, batch.inputs, batch.attention_mask, options);
        TensorT<S> logits = mlm_logits(model, out.final_hidden(), &tape);
        TensorT<S> loss = softmax_cross_entropy(&tape, logits, batch.labels);
        TensorT<S> objective =
            scale(&tape, loss,
                  static_cast<S>(1.0 / static_cast<double>(config.accumulation_steps)));
        tape.backward(objective);

        LossBreakdown breakdown;
        breakdown.l_mlm = static_cast<double>(loss.item());
        breakdown.total = breakdown.l_mlm;
        return breakdown;
      },
      log);
}

}  // namespace distillforge
