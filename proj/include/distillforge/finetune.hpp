#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "distillforge/common.hpp"
#include "distillforge/corpus.hpp"
#include "distillforge/encoder.hpp"
#include "distillforge/losses.hpp"
#include "distillforge/optimizer.hpp"
#include "distillforge/tokenizer.hpp"

namespace distillforge {

enum class TaskKind { sequence_classification, token_classification };
enum class TruncationStrategy { keep_first, keep_last };
enum class MetricKind { accuracy, micro_f1 };

struct TaskSpec {
  TaskKind kind = TaskKind::sequence_classification;
  std::size_t num_labels = 2;
  TruncationStrategy truncation = TruncationStrategy::keep_last;
  MetricKind metric = MetricKind::accuracy;

  void validate() const {
    if (num_labels < 2) {
      fail(ErrorKind::config, "a task needs at least 2 labels, got " +
                                  std::to_string(num_labels));
    }
  }
};

struct SequenceExample {
  std::int32_t label = 0;
  std::string text;
};

struct TokenExample {
  std::vector<std::string> tokens;
  std::vector<std::int32_t> tags;
};

/// `label<TAB>text` per line; labels are dense non-negative integers.
inline std::vector<SequenceExample> load_sequence_examples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::vector<SequenceExample> examples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      fail(ErrorKind::parse,
           path + ": line " + std::to_string(line_no) + " is not \"label<TAB>text\"");
    }
    SequenceExample ex;
    try {
      std::size_t used = 0;
      ex.label = std::stoi(line.substr(0, tab), &used);
      if (used != tab) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      fail(ErrorKind::parse, path + ": line " + std::to_string(line_no) +
                                 " has a non-integer label \"" + line.substr(0, tab) + "\"");
    }
    ex.text = line.substr(tab + 1);
    examples.push_back(std::move(ex));
  }
  return examples;
}

/// `token<SPACE>tag` per line, blank lines separate sentences.
inline std::vector<TokenExample> load_token_examples(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::vector<TokenExample> examples;
  TokenExample current;
  std::string line;
  std::size_t line_no = 0;
  auto flush = [&]() {
    if (!current.tokens.empty()) {
      examples.push_back(std::move(current));
      current = TokenExample{};
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    const std::size_t space = line.rfind(' ');
    if (space == std::string::npos || space == 0 || space + 1 >= line.size()) {
      fail(ErrorKind::parse,
           path + ": line " + std::to_string(line_no) + " is not \"token tag\"");
    }
    try {
      std::size_t used = 0;
      const std::string tag_text = line.substr(space + 1);
      current.tags.push_back(std::stoi(tag_text, &used));
      if (used != tag_text.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      fail(ErrorKind::parse, path + ": line " + std::to_string(line_no) +
                                 " has a non-integer tag");
    }
    current.tokens.push_back(line.substr(0, space));
  }
  flush();
  return examples;
}

/// Encoder plus a linear classification head. The encoder tensors are shared
/// with the model the head was attached to; clone first for isolation.
struct TaskModel {
  EncoderModel encoder;
  Tensor head_w;
  Tensor head_b;
  TaskSpec spec;

  std::vector<Tensor*> trainable_parameters() {
    std::vector<Tensor*> params;
    for (auto& [name, tensor] : encoder.named_parameters()) {
      (void)name;
      params.push_back(tensor);
    }
    params.push_back(&head_w);
    params.push_back(&head_b);
    return params;
  }
};

inline TaskModel attach_head(const EncoderModel& model, const TaskSpec& spec,
                             std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  TaskModel task;
  task.encoder = model;
  task.spec = spec;
  task.head_w = Tensor::randn({model.config.h, spec.num_labels}, rng, 0.02, true);
  task.head_b = Tensor::zeros({spec.num_labels}, true);
  return task;
}

/// Sequence tasks read the first position's final hidden state, giving
/// batch x num_labels; token tasks classify every position, giving
/// batch x len x num_labels.
inline Tensor task_logits(const TaskModel& model, const IdBatch& ids,
                          const std::vector<std::uint8_t>& attention_mask,
                          const ForwardOptions& options = {}) {
  auto& m = const_cast<TaskModel&>(model);
  const ForwardResult out = forward(model.encoder, ids, attention_mask, options);
  Tape* tape = options.tape;
  if (model.spec.kind == TaskKind::sequence_classification) {
    const Tensor pooled = take_position(tape, out.final_hidden(), 0);
    return add(tape, matmul(tape, pooled, m.head_w), m.head_b);
  }
  return add(tape, matmul(tape, out.final_hidden(), m.head_w), m.head_b);
}

struct HyperparameterSample {
  double learning_rate = 1e-5;
  double weight_decay = 0.0;
  std::size_t gradient_accumulation_steps = 2;
  std::size_t epochs = 3;
  std::size_t batch = 8;
  std::size_t max_len = 512;
  std::uint64_t seed = 1;
  double adam_epsilon = 1e-8;
  std::size_t warmup_steps = 0;
  double max_grad_norm = 1.0;
};

/// Random search draws: learning rate log-uniform over [1e-6, 1e-4], weight
/// decay uniform over [0, 0.1], accumulation from {2, 4, 8, 16}; everything
/// else fixed.
inline std::vector<HyperparameterSample> sample_hyperparameters(std::size_t n,
                                                                std::uint64_t seed) {
  if (n < 1) fail(ErrorKind::invalid_argument, "need at least one hyperparameter sample");
  static const std::size_t kAccumChoices[] = {2, 4, 8, 16};
  Rng rng(seed);
  std::vector<HyperparameterSample> samples(n);
  for (auto& sample : samples) {
    sample.learning_rate = log_uniform(rng, 1e-6, 1e-4);
    sample.weight_decay = uniform_real(rng, 0.0, 0.1);
    sample.gradient_accumulation_steps = kAccumChoices[uniform_index(rng, 4)];
  }
  return samples;
}

struct MetricValue {
  double value = 0.0;
  /// Negative when no interval is defined for the metric.
  double ci_half_width = -1.0;
  std::size_t n = 0;
};

/// Proportion correct with a 1.96 * sqrt(p(1-p)/n) half-width.
inline MetricValue accuracy_metric(std::size_t correct, std::size_t total) {
  if (total == 0) fail(ErrorKind::invalid_argument, "accuracy over zero examples");
  MetricValue metric;
  metric.n = total;
  metric.value = static_cast<double>(correct) / static_cast<double>(total);
  metric.ci_half_width =
      1.96 * std::sqrt(metric.value * (1.0 - metric.value) / static_cast<double>(total));
  return metric;
}

/// Micro-F1 over the positive classes (label 0 is the negative class). With
/// no positives anywhere the score is vacuously 1; with positives but no
/// correct predictions it is 0. No interval is defined for F1.
inline MetricValue micro_f1_metric(const std::vector<std::int32_t>& predictions,
                                   const std::vector<std::int32_t>& golds) {
  if (predictions.size() != golds.size()) {
    fail(ErrorKind::shape_mismatch, "prediction and gold counts differ");
  }
  if (golds.empty()) fail(ErrorKind::invalid_argument, "micro-F1 over zero tokens");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const bool pred_pos = predictions[i] != 0;
    const bool gold_pos = golds[i] != 0;
    if (pred_pos && predictions[i] == golds[i]) ++tp;
    else if (pred_pos) ++fp;
    if (gold_pos && predictions[i] != golds[i]) ++fn;
  }
  MetricValue metric;
  metric.n = golds.size();
  if (tp + fp + fn == 0) {
    metric.value = 1.0;
    return metric;
  }
  const double precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
  const double recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
  metric.value = (precision + recall) == 0.0
                     ? 0.0
                     : 2.0 * precision * recall / (precision + recall);
  return metric;
}

namespace detail {

/// Ids plus aligned labels for one example. Sequence tasks put the label in
/// `sequence_label`; token tasks label the first piece of each word and
/// ignore the rest.
struct EncodedExample {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> labels;
  std::int32_t sequence_label = kIgnoreLabel;
};

inline void check_label(std::int32_t label, std::size_t num_labels, const char* what) {
  if (label < 0 || static_cast<std::size_t>(label) >= num_labels) {
    fail(ErrorKind::data, std::string(what) + " " + std::to_string(label) +
                              " outside [0, " + std::to_string(num_labels) + ")");
  }
}

inline void truncate_with_labels(EncodedExample& ex, std::size_t max_len,
                                 TruncationStrategy strategy) {
  if (ex.ids.size() <= max_len) return;
  if (strategy == TruncationStrategy::keep_first) {
    ex.ids.resize(max_len);
    if (!ex.labels.empty()) ex.labels.resize(max_len);
    return;
  }
  ex.ids = truncate_keep_last(ex.ids, max_len);
  if (!ex.labels.empty()) {
    std::vector<std::int32_t> kept;
    kept.reserve(max_len);
    kept.push_back(kIgnoreLabel);
    kept.insert(kept.end(), ex.labels.end() - static_cast<std::ptrdiff_t>(max_len - 1),
                ex.labels.end());
    ex.labels = std::move(kept);
  }
}

inline EncodedExample encode_sequence_example(const SequenceExample& ex,
                                              const Tokenizer& tokenizer,
                                              const TaskSpec& spec, std::size_t max_len) {
  check_label(ex.label, spec.num_labels, "label");
  EncodedExample enc;
  enc.ids = tokenizer.encode(ex.text);
  enc.sequence_label = ex.label;
  truncate_with_labels(enc, max_len, spec.truncation);
  return enc;
}

inline EncodedExample encode_token_example(const TokenExample& ex, const Tokenizer& tokenizer,
                                           const TaskSpec& spec, std::size_t max_len) {
  if (ex.tokens.size() != ex.tags.size()) {
    fail(ErrorKind::data, "token example has " + std::to_string(ex.tokens.size()) +
                              " tokens but " + std::to_string(ex.tags.size()) + " tags");
  }
  EncodedExample enc;
  enc.ids.push_back(kBosId);
  enc.labels.push_back(kIgnoreLabel);
  for (std::size_t w = 0; w < ex.tokens.size(); ++w) {
    check_label(ex.tags[w], spec.num_labels, "tag");
    bool first = true;
    for (const auto& piece : segment_word(ex.tokens[w], tokenizer.merges)) {
      enc.ids.push_back(tokenizer.vocab.id_of(piece));
      enc.labels.push_back(first ? ex.tags[w] : kIgnoreLabel);
      first = false;
    }
  }
  enc.ids.push_back(kEosId);
  enc.labels.push_back(kIgnoreLabel);
  truncate_with_labels(enc, max_len, spec.truncation);
  return enc;
}

struct TaskBatch {
  IdBatch ids;
  std::vector<std::uint8_t> attention_mask;
  std::vector<std::int32_t> labels;
};

/// Pads a slice of encoded examples. Sequence tasks produce one label per
/// example; token tasks one label per position (ignore at padding).
inline TaskBatch make_task_batch(const std::vector<EncodedExample>& examples,
                                 const std::vector<std::size_t>& order, std::size_t start,
                                 std::size_t end, TaskKind kind) {
  std::size_t width = 0;
  for (std::size_t i = start; i < end; ++i) {
    width = std::max(width, examples[order[i]].ids.size());
  }
  TaskBatch batch;
  batch.ids.batch = end - start;
  batch.ids.len = width;
  batch.ids.ids.assign(batch.ids.batch * width, kPadId);
  batch.attention_mask.assign(batch.ids.batch * width, 0);
  if (kind == TaskKind::token_classification) {
    batch.labels.assign(batch.ids.batch * width, kIgnoreLabel);
  }
  for (std::size_t r = 0; r < batch.ids.batch; ++r) {
    const EncodedExample& ex = examples[order[start + r]];
    for (std::size_t c = 0; c < ex.ids.size(); ++c) {
      batch.ids.ids[r * width + c] = ex.ids[c];
      batch.attention_mask[r * width + c] = 1;
      if (kind == TaskKind::token_classification) {
        batch.labels[r * width + c] = ex.labels[c];
      }
    }
    if (kind == TaskKind::sequence_classification) {
      batch.labels.push_back(ex.sequence_label);
    }
  }
  return batch;
}

template <typename Example>
std::vector<EncodedExample> encode_examples(const std::vector<Example>& examples,
                                            const Tokenizer& tokenizer, const TaskSpec& spec,
                                            std::size_t max_len) {
  std::vector<EncodedExample> encoded;
  encoded.reserve(examples.size());
  for (const auto& ex : examples) {
    if constexpr (std::is_same_v<Example, SequenceExample>) {
      encoded.push_back(encode_sequence_example(ex, tokenizer, spec, max_len));
    } else {
      encoded.push_back(encode_token_example(ex, tokenizer, spec, max_len));
    }
  }
  return encoded;
}

}  // namespace detail

/// Cross-entropy fine-tuning with the sample's settings: AdamW with decoupled
/// weight decay, gradient accumulation, and global-norm clipping. Trains in
/// place and returns nothing; callers evaluate separately.
template <typename Example>
void finetune_train(TaskModel& model, const Tokenizer& tokenizer,
                    const std::vector<Example>& train, const HyperparameterSample& sample) {
  model.spec.validate();
  if (train.empty()) fail(ErrorKind::invalid_argument, "finetune_train: empty split");
  const std::size_t max_len = std::min(sample.max_len, model.encoder.config.max_positions);
  auto encoded = detail::encode_examples(train, tokenizer, model.spec, max_len);

  Rng rng(sample.seed);
  auto params = model.trainable_parameters();
  AdamWConfig adam;
  adam.lr = sample.learning_rate;
  adam.eps = sample.adam_epsilon;
  adam.weight_decay = sample.weight_decay;
  AdamW optimizer(params, adam);

  std::vector<std::size_t> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < sample.epochs; ++epoch) {
    order = shuffle_records(std::move(order), rng());
    std::size_t micro_in_window = 0;
    auto flush = [&]() {
      if (micro_in_window == 0) return;
      clip_global_norm(params, sample.max_grad_norm);
      optimizer.step();
      optimizer.zero_grad();
      micro_in_window = 0;
    };
    for (std::size_t start = 0; start < order.size(); start += sample.batch) {
      const std::size_t end = std::min(order.size(), start + sample.batch);
      const detail::TaskBatch batch =
          detail::make_task_batch(encoded, order, start, end, model.spec.kind);
      Tape tape;
      ForwardOptions options;
      options.train = true;
      options.rng = &rng;
      options.tape = &tape;
      const Tensor logits = task_logits(model, batch.ids, batch.attention_mask, options);
      const Tensor loss = softmax_cross_entropy(&tape, logits, batch.labels);
      const Tensor objective = scale(
          &tape, loss,
          1.0f / static_cast<float>(sample.gradient_accumulation_steps));
      tape.backward(objective);
      if (++micro_in_window == sample.gradient_accumulation_steps) flush();
    }
    flush();
  }
}

/// Metric on a split, eval mode. Accuracy for sequence tasks counts
/// examples; token metrics count labeled positions.
template <typename Example>
MetricValue evaluate(const TaskModel& model, const Tokenizer& tokenizer,
                     const std::vector<Example>& split) {
  model.spec.validate();
  if (split.empty()) fail(ErrorKind::invalid_argument, "evaluate: empty split");
  const std::size_t max_len =
      std::min<std::size_t>(512, model.encoder.config.max_positions);
  auto encoded = detail::encode_examples(split, tokenizer, model.spec, max_len);

  std::vector<std::size_t> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<std::int32_t> predictions;
  std::vector<std::int32_t> golds;
  constexpr std::size_t kEvalBatch = 16;
  for (std::size_t start = 0; start < order.size(); start += kEvalBatch) {
    const std::size_t end = std::min(order.size(), start + kEvalBatch);
    const detail::TaskBatch batch =
        detail::make_task_batch(encoded, order, start, end, model.spec.kind);
    const Tensor logits = task_logits(model, batch.ids, batch.attention_mask);
    const std::size_t classes = model.spec.num_labels;
    const std::size_t rows = logits.numel() / classes;
    for (std::size_t r = 0; r < rows; ++r) {
      if (batch.labels[r] == kIgnoreLabel) continue;
      const float* z = logits.values().data() + r * classes;
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (z[c] > z[best]) best = c;
      }
      predictions.push_back(static_cast<std::int32_t>(best));
      golds.push_back(batch.labels[r]);
    }
  }
  if (model.spec.metric == MetricKind::micro_f1) {
    return micro_f1_metric(predictions, golds);
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    correct += predictions[i] == golds[i] ? 1 : 0;
  }
  return accuracy_metric(correct, predictions.size());
}

struct FinetuneEntry {
  HyperparameterSample sample;
  MetricValue validation;
};

struct FinetuneResult {
  std::vector<FinetuneEntry> entries;
  std::size_t selected = 0;
  MetricValue test;
};

/// Called with ("train", i), ("validate", i) per sample, then ("select", i)
/// and ("test", i) once each, in that order.
using SearchObserver = std::function<void(const std::string&, std::size_t)>;

/// The full protocol: for each drawn sample, fine-tune a fresh copy of the
/// encoder and score validation; then select the best validation metric
/// (ties to the lowest index) and only then compute the test metric on the
/// winning model.
template <typename Example>
FinetuneResult run_hyperparameter_search(const EncoderModel& encoder,
                                         const Tokenizer& tokenizer, const TaskSpec& spec,
                                         const std::vector<Example>& train,
                                         const std::vector<Example>& validation,
                                         const std::vector<Example>& test,
                                         std::size_t n_samples, std::uint64_t search_seed,
                                         const SearchObserver& observer = {},
                                         TaskModel* best_model_out = nullptr) {
  spec.validate();
  if (train.empty() || validation.empty() || test.empty()) {
    fail(ErrorKind::invalid_argument, "hyperparameter search needs non-empty splits");
  }
  const auto samples = sample_hyperparameters(n_samples, search_seed);

  FinetuneResult result;
  std::vector<TaskModel> trained;
  trained.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    TaskModel model = attach_head(clone_model(encoder), spec, search_seed + 1 + i);
    if (observer) observer("train", i);
    finetune_train(model, tokenizer, train, samples[i]);
    if (observer) observer("validate", i);
    const MetricValue val = evaluate(model, tokenizer, validation);
    result.entries.push_back({samples[i], val});
    trained.push_back(std::move(model));
  }

  result.selected = 0;
  for (std::size_t i = 1; i < result.entries.size(); ++i) {
    if (result.entries[i].validation.value > result.entries[result.selected].validation.value) {
      result.selected = i;
    }
  }
  if (observer) observer("select", result.selected);
  if (observer) observer("test", result.selected);
  result.test = evaluate(trained[result.selected], tokenizer, test);
  if (best_model_out != nullptr) *best_model_out = trained[result.selected];
  return result;
}

}  // namespace distillforge
