#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillforge/common.hpp"
#include "distillforge/distill.hpp"
#include "distillforge/encoder.hpp"
#include "distillforge/finetune.hpp"

namespace distillforge {

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::vector<std::string>& allowed,
                                const std::string& where) {
  if (!j.is_object()) {
    fail(ErrorKind::config, where + " must be a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(ErrorKind::config, "unknown key \"" + key + "\" in " + where);
    }
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, where + "." + key + ": " + e.what());
  }
}

inline std::string require_path(const std::string& value, const char* key,
                                const std::string& where) {
  if (value.empty()) {
    fail(ErrorKind::config, where + " requires \"" + key + "\"");
  }
  return value;
}

}  // namespace detail

struct TokenizerSection {
  bool present = false;
  std::string corpus;
  std::size_t vocab_size = 300;
  std::string vocab_file;
  std::string merges_file;
};

struct CorpusSection {
  bool present = false;
  std::string input;
  double merge_p = 0.5;
  std::uint64_t merge_seed = 0;
  bool shuffle = false;
  std::uint64_t shuffle_seed = 0;
  std::size_t shards = 1;
  std::size_t bin_width = 10;
  std::size_t length_cutoff = 512;
};

struct ModelSection {
  bool present = false;
  bool teacher_present = false;
  bool student_present = false;
  EncoderConfig teacher;
  EncoderConfig student;
  std::string teacher_checkpoint;
};

struct FinetuneSection {
  bool present = false;
  TaskSpec spec;
  std::size_t samples = 5;
  std::uint64_t search_seed = 1;
  std::string train;
  std::string validation;
  std::string test;
  std::string encoder_checkpoint;
};

struct EvalSection {
  bool present = false;
  std::string checkpoint;
  std::string sequences;
  std::string templates;
  std::string target_1;
  std::string target_2;
};

struct RunConfig {
  TokenizerSection tokenizer;
  CorpusSection corpus;
  ModelSection model;
  bool distill_present = false;
  DistillConfig distill;
  FinetuneSection finetune;
  EvalSection eval;
};

inline DistillConfig distill_config_from_json(const nlohmann::json& j,
                                              const std::string& where) {
  detail::reject_unknown_keys(
      j,
      {"temperature", "alpha_ce", "alpha_mlm", "alpha_cos", "mask_rate", "mask_fraction",
       "random_fraction", "micro_batch", "accumulation_steps", "epochs", "max_len",
       "learning_rate", "schedule", "seed"},
      where);
  DistillConfig config;
  config.temperature = detail::get_or(j, "temperature", config.temperature, where);
  config.alpha_ce = detail::get_or(j, "alpha_ce", config.alpha_ce, where);
  config.alpha_mlm = detail::get_or(j, "alpha_mlm", config.alpha_mlm, where);
  config.alpha_cos = detail::get_or(j, "alpha_cos", config.alpha_cos, where);
  config.mask_rate = detail::get_or(j, "mask_rate", config.mask_rate, where);
  config.mask_fraction = detail::get_or(j, "mask_fraction", config.mask_fraction, where);
  config.random_fraction =
      detail::get_or(j, "random_fraction", config.random_fraction, where);
  config.micro_batch = detail::get_or(j, "micro_batch", config.micro_batch, where);
  config.accumulation_steps =
      detail::get_or(j, "accumulation_steps", config.accumulation_steps, where);
  config.epochs = detail::get_or(j, "epochs", config.epochs, where);
  config.max_len = detail::get_or(j, "max_len", config.max_len, where);
  config.learning_rate = detail::get_or(j, "learning_rate", config.learning_rate, where);
  config.schedule = detail::get_or<std::string>(j, "schedule", config.schedule, where);
  config.seed = detail::get_or(j, "seed", config.seed, where);
  config.validate();
  return config;
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j, const std::string& where) {
  TaskSpec spec;
  const std::string kind = detail::get_or<std::string>(j, "task", "sequence", where);
  if (kind == "sequence") spec.kind = TaskKind::sequence_classification;
  else if (kind == "token") spec.kind = TaskKind::token_classification;
  else fail(ErrorKind::config, where + ".task must be \"sequence\" or \"token\"");
  spec.num_labels = detail::get_or<std::size_t>(j, "num_labels", 2, where);
  const std::string metric = detail::get_or<std::string>(
      j, "metric", spec.kind == TaskKind::token_classification ? "micro_f1" : "accuracy",
      where);
  if (metric == "accuracy") spec.metric = MetricKind::accuracy;
  else if (metric == "micro_f1") spec.metric = MetricKind::micro_f1;
  else fail(ErrorKind::config, where + ".metric must be \"accuracy\" or \"micro_f1\"");
  const std::string trunc =
      detail::get_or<std::string>(j, "truncation", "keep_last", where);
  if (trunc == "keep_first") spec.truncation = TruncationStrategy::keep_first;
  else if (trunc == "keep_last") spec.truncation = TruncationStrategy::keep_last;
  else {
    fail(ErrorKind::config, where + ".truncation must be \"keep_first\" or \"keep_last\"");
  }
  spec.validate();
  return spec;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::reject_unknown_keys(
      j, {"tokenizer", "corpus", "model", "distill", "finetune", "eval"}, "config");
  RunConfig config;

  if (j.contains("tokenizer")) {
    const auto& t = j.at("tokenizer");
    detail::reject_unknown_keys(t, {"corpus", "vocab_size", "vocab_file", "merges_file"},
                                "tokenizer");
    config.tokenizer.present = true;
    config.tokenizer.corpus = detail::get_or<std::string>(t, "corpus", "", "tokenizer");
    config.tokenizer.vocab_size =
        detail::get_or<std::size_t>(t, "vocab_size", 300, "tokenizer");
    config.tokenizer.vocab_file =
        detail::get_or<std::string>(t, "vocab_file", "", "tokenizer");
    config.tokenizer.merges_file =
        detail::get_or<std::string>(t, "merges_file", "", "tokenizer");
  }

  if (j.contains("corpus")) {
    const auto& c = j.at("corpus");
    detail::reject_unknown_keys(c,
                                {"input", "merge_p", "merge_seed", "shuffle",
                                 "shuffle_seed", "shards", "bin_width", "length_cutoff"},
                                "corpus");
    config.corpus.present = true;
    config.corpus.input = detail::get_or<std::string>(c, "input", "", "corpus");
    config.corpus.merge_p = detail::get_or(c, "merge_p", 0.5, "corpus");
    config.corpus.merge_seed = detail::get_or<std::uint64_t>(c, "merge_seed", 0, "corpus");
    config.corpus.shuffle = detail::get_or(c, "shuffle", false, "corpus");
    config.corpus.shuffle_seed =
        detail::get_or<std::uint64_t>(c, "shuffle_seed", 0, "corpus");
    config.corpus.shards = detail::get_or<std::size_t>(c, "shards", 1, "corpus");
    config.corpus.bin_width = detail::get_or<std::size_t>(c, "bin_width", 10, "corpus");
    config.corpus.length_cutoff =
        detail::get_or<std::size_t>(c, "length_cutoff", 512, "corpus");
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown_keys(m, {"teacher", "student", "teacher_checkpoint"}, "model");
    config.model.present = true;
    if (m.contains("teacher")) {
      config.model.teacher_present = true;
      config.model.teacher = encoder_config_from_json(m.at("teacher"));
    }
    if (m.contains("student")) {
      config.model.student_present = true;
      config.model.student = encoder_config_from_json(m.at("student"));
    }
    config.model.teacher_checkpoint =
        detail::get_or<std::string>(m, "teacher_checkpoint", "", "model");
  }

  if (j.contains("distill")) {
    config.distill_present = true;
    config.distill = distill_config_from_json(j.at("distill"), "distill");
  }

  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    detail::reject_unknown_keys(f,
                                {"task", "num_labels", "metric", "truncation", "samples",
                                 "search_seed", "train", "validation", "test",
                                 "encoder_checkpoint"},
                                "finetune");
    config.finetune.present = true;
    config.finetune.spec = task_spec_from_json(f, "finetune");
    config.finetune.samples = detail::get_or<std::size_t>(f, "samples", 5, "finetune");
    config.finetune.search_seed =
        detail::get_or<std::uint64_t>(f, "search_seed", 1, "finetune");
    config.finetune.train = detail::get_or<std::string>(f, "train", "", "finetune");
    config.finetune.validation =
        detail::get_or<std::string>(f, "validation", "", "finetune");
    config.finetune.test = detail::get_or<std::string>(f, "test", "", "finetune");
    config.finetune.encoder_checkpoint =
        detail::get_or<std::string>(f, "encoder_checkpoint", "", "finetune");
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown_keys(
        e, {"checkpoint", "sequences", "templates", "target_1", "target_2"}, "eval");
    config.eval.present = true;
    config.eval.checkpoint = detail::get_or<std::string>(e, "checkpoint", "", "eval");
    config.eval.sequences = detail::get_or<std::string>(e, "sequences", "", "eval");
    config.eval.templates = detail::get_or<std::string>(e, "templates", "", "eval");
    config.eval.target_1 = detail::get_or<std::string>(e, "target_1", "", "eval");
    config.eval.target_2 = detail::get_or<std::string>(e, "target_2", "", "eval");
  }

  return config;
}

/// Reads a config file; returns both the parsed config and the raw bytes so
/// callers can hash and archive exactly what was given.
inline RunConfig load_run_config(const std::string& path, std::string* raw_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::parse, path + ": " + e.what());
  }
  if (raw_out != nullptr) *raw_out = raw;
  return parse_run_config(j);
}

}  // namespace distillforge
