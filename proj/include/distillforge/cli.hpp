#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "distillforge/checkpoint.hpp"
#include "distillforge/common.hpp"
#include "distillforge/corpus.hpp"
#include "distillforge/distill.hpp"
#include "distillforge/encoder.hpp"
#include "distillforge/eval.hpp"
#include "distillforge/finetune.hpp"
#include "distillforge/run_config.hpp"
#include "distillforge/tokenizer.hpp"

namespace distillforge {

/// Exit codes are part of the tool's contract: scripts branch on them.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return 2;
    case ErrorKind::shape_mismatch: return 3;
    case ErrorKind::config: return 4;
    case ErrorKind::io: return 5;
    case ErrorKind::parse: return 6;
    case ErrorKind::version: return 7;
    case ErrorKind::data: return 8;
  }
  return 1;
}

namespace detail {

struct CliRun {
  std::string command;
  std::string config_path;
  std::string out_dir;
  bool has_seed = false;
  std::uint64_t seed = 0;
  bool has_merge_p = false;
  double merge_p = 0.0;

  RunConfig config;
  std::string raw_config;
  std::vector<std::string> artifacts;
  std::ostream* out = nullptr;
};

inline std::filesystem::path run_path(const CliRun& run, const std::string& relative) {
  return std::filesystem::path(run.out_dir) / relative;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  out << content;
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

inline std::string hex64(std::uint64_t value) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << value;
  return out.str();
}

/// Creates the run directory layout and archives the exact config bytes.
inline void prepare_run_dir(CliRun& run) {
  if (run.out_dir.empty()) fail(ErrorKind::invalid_argument, "--out is required");
  std::error_code ec;
  for (const char* sub : {"", "checkpoints", "logs", "reports", "data"}) {
    std::filesystem::create_directories(run_path(run, sub), ec);
    if (ec) {
      fail(ErrorKind::io, "cannot create " + run_path(run, sub).string() + ": " + ec.message());
    }
  }
  write_text_file(run_path(run, "config.json"), run.raw_config);
}

inline void write_manifest(const CliRun& run) {
  nlohmann::json manifest;
  manifest["command"] = run.command;
  manifest["config"] = run.config_path;
  manifest["config_hash"] = hex64(fnv1a64(run.raw_config));
  if (run.has_seed) manifest["seed"] = run.seed;
  else manifest["seed"] = nullptr;
  manifest["threads"] = max_threads();
  manifest["artifacts"] = run.artifacts;
  write_text_file(run_path(run, "manifest.json"), manifest.dump(2) + "\n");
}

/// Documents are only a container here; training and evaluation consume the
/// individual lines.
inline std::vector<std::string> read_corpus_lines(const std::string& path) {
  std::vector<std::string> lines;
  for (const Document& doc : load_documents(path)) {
    for (const std::string& line : doc.lines) lines.push_back(line);
  }
  return lines;
}

inline Tokenizer load_tokenizer_files(const CliRun& run) {
  const auto& section = run.config.tokenizer;
  if (!section.present || section.vocab_file.empty() || section.merges_file.empty()) {
    fail(ErrorKind::config,
         "this command needs tokenizer.vocab_file and tokenizer.merges_file");
  }
  return Tokenizer::load(section.vocab_file, section.merges_file);
}

inline std::vector<std::vector<std::int32_t>> encode_lines(
    const Tokenizer& tokenizer, const std::vector<std::string>& lines) {
  std::vector<std::vector<std::int32_t>> encoded(lines.size());
  parallel_for(lines.size(),
               [&](std::size_t i) { encoded[i] = tokenizer.encode(lines[i]); });
  return encoded;
}

inline void run_tokenizer_train(CliRun& run) {
  const auto& section = run.config.tokenizer;
  if (!section.present) fail(ErrorKind::config, "config has no tokenizer section");
  require_path(section.corpus, "corpus", "tokenizer");
  prepare_run_dir(run);

  const std::vector<std::string> lines = read_corpus_lines(section.corpus);
  auto [vocab, merges] = train_bpe(lines, section.vocab_size);
  save_vocabulary(vocab, run_path(run, "checkpoints/vocab.txt").string());
  save_merges(merges, run_path(run, "checkpoints/merges.txt").string());
  run.artifacts.push_back("checkpoints/vocab.txt");
  run.artifacts.push_back("checkpoints/merges.txt");

  *run.out << "trained vocabulary of " << vocab.size() << " tokens with "
           << merges.rules().size() << " merge rules from " << lines.size()
           << " lines\n";
}

inline std::string shard_name(std::size_t index) {
  std::ostringstream name;
  name << "data/shard_" << std::setw(3) << std::setfill('0') << index << ".txt";
  return name.str();
}

inline void run_corpus_prep(CliRun& run) {
  const auto& section = run.config.corpus;
  if (!section.present) fail(ErrorKind::config, "config has no corpus section");
  require_path(section.input, "input", "corpus");
  prepare_run_dir(run);

  MergePolicy policy;
  policy.p = run.has_merge_p ? run.merge_p : section.merge_p;
  policy.seed = run.has_seed ? run.seed : section.merge_seed;

  const std::vector<Document> documents = load_documents(section.input);
  std::vector<SequenceRecord> records = merge_sequences(documents, policy);
  const std::size_t merged =
      records.empty() ? 0
                      : std::count_if(records.begin(), records.end(),
                                      [](const SequenceRecord& r) { return r.merged_from > 1; });
  if (section.shuffle) {
    records = shuffle_records(std::move(records),
                              run.has_seed ? run.seed : section.shuffle_seed);
  }

  const auto shards = split_shards(records, section.shards);
  for (std::size_t s = 0; s < shards.size(); ++s) {
    std::ostringstream body;
    for (const SequenceRecord& record : shards[s]) body << record.text << '\n';
    const std::string name = shard_name(s);
    write_text_file(run_path(run, name), body.str());
    run.artifacts.push_back(name);
  }

  *run.out << "prepared " << records.size() << " records from " << documents.size()
           << " documents (" << merged << " merged, p=" << policy.p << ", shuffle="
           << (section.shuffle ? "on" : "off") << ") into " << shards.size()
           << " shards\n";
}

inline DistillConfig effective_distill_config(const CliRun& run) {
  DistillConfig config = run.config.distill_present ? run.config.distill : DistillConfig{};
  if (run.has_seed) config.seed = run.seed;
  return config;
}

inline void report_epoch_losses(std::ostream& out, const DistillRunResult& result) {
  for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
    const LossBreakdown& mean = result.epoch_losses[e];
    out << "epoch " << (e + 1) << " mean loss " << mean.total << " (ce " << mean.l_ce
        << ", mlm " << mean.l_mlm << ", cos " << mean.l_cos << ")\n";
  }
  out << "optimizer steps: " << result.optimizer_steps << '\n';
}

inline void run_pretrain(CliRun& run) {
  if (!run.config.model.teacher_present) {
    fail(ErrorKind::config, "pretrain needs model.teacher");
  }
  const auto& corpus_section = run.config.corpus;
  if (!corpus_section.present || corpus_section.input.empty()) {
    fail(ErrorKind::config, "pretrain needs corpus.input");
  }
  prepare_run_dir(run);

  const Tokenizer tokenizer = load_tokenizer_files(run);
  EncoderConfig model_config = run.config.model.teacher;
  if (model_config.vocab_size != tokenizer.vocab_size()) {
    fail(ErrorKind::config,
         "model.teacher.vocab_size " + std::to_string(model_config.vocab_size) +
             " does not match tokenizer vocabulary " +
             std::to_string(tokenizer.vocab_size()));
  }
  const DistillConfig config = effective_distill_config(run);

  const auto encoded = encode_lines(tokenizer, read_corpus_lines(corpus_section.input));
  EncoderModel model = init_random<float>(model_config, config.seed);

  std::ofstream log(run_path(run, "logs/pretrain.jsonl"));
  if (!log) fail(ErrorKind::io, "cannot write pretrain log");
  run.artifacts.push_back("logs/pretrain.jsonl");

  const DistillRunResult result = pretrain_run(model, encoded, config, &log);
  save_checkpoint(model, run_path(run, "checkpoints/pretrained.dfck").string());
  run.artifacts.push_back("checkpoints/pretrained.dfck");
  report_epoch_losses(*run.out, result);
}

inline void run_distill(CliRun& run) {
  const auto& model_section = run.config.model;
  if (!model_section.present || model_section.teacher_checkpoint.empty()) {
    fail(ErrorKind::config, "distill needs model.teacher_checkpoint");
  }
  if (!model_section.student_present) fail(ErrorKind::config, "distill needs model.student");
  const auto& corpus_section = run.config.corpus;
  if (!corpus_section.present || corpus_section.input.empty()) {
    fail(ErrorKind::config, "distill needs corpus.input");
  }
  prepare_run_dir(run);

  const Tokenizer tokenizer = load_tokenizer_files(run);
  const EncoderModel teacher = load_checkpoint(model_section.teacher_checkpoint);
  if (model_section.teacher_present && !(teacher.config == model_section.teacher)) {
    fail(ErrorKind::config,
         "teacher checkpoint disagrees with model.teacher in the config");
  }
  if (teacher.config.vocab_size != tokenizer.vocab_size()) {
    fail(ErrorKind::config, "teacher checkpoint vocabulary does not match tokenizer");
  }

  const DistillConfig config = effective_distill_config(run);
  std::vector<std::string> notices;
  EncoderModel student =
      init_student_from_teacher(teacher, model_section.student, config.seed, &notices);
  for (const std::string& notice : notices) *run.out << "notice: " << notice << '\n';

  const auto encoded = encode_lines(tokenizer, read_corpus_lines(corpus_section.input));
  std::ofstream log(run_path(run, "logs/distill.jsonl"));
  if (!log) fail(ErrorKind::io, "cannot write distill log");
  run.artifacts.push_back("logs/distill.jsonl");

  const DistillRunResult result = distill_run(teacher, student, encoded, config, &log);
  save_checkpoint(student, run_path(run, "checkpoints/student.dfck").string());
  run.artifacts.push_back("checkpoints/student.dfck");
  report_epoch_losses(*run.out, result);
}

inline nlohmann::json metric_to_json(const MetricValue& metric) {
  nlohmann::json j;
  j["value"] = metric.value;
  if (metric.ci_half_width >= 0.0) j["ci_half_width"] = metric.ci_half_width;
  else j["ci_half_width"] = nullptr;
  j["n"] = metric.n;
  return j;
}

template <typename Example>
void finetune_with(CliRun& run, std::vector<Example> (*loader)(const std::string&)) {
  const auto& section = run.config.finetune;
  const EncoderModel encoder = load_checkpoint(section.encoder_checkpoint);
  const Tokenizer tokenizer = load_tokenizer_files(run);

  const auto train = loader(section.train);
  const auto validation = loader(section.validation);
  const auto test = loader(section.test);
  const std::uint64_t search_seed = run.has_seed ? run.seed : section.search_seed;

  const FinetuneResult result = run_hyperparameter_search(
      encoder, tokenizer, section.spec, train, validation, test, section.samples,
      search_seed);

  nlohmann::json report;
  report["samples"] = nlohmann::json::array();
  for (const FinetuneEntry& entry : result.entries) {
    nlohmann::json row;
    row["learning_rate"] = entry.sample.learning_rate;
    row["weight_decay"] = entry.sample.weight_decay;
    row["gradient_accumulation_steps"] = entry.sample.gradient_accumulation_steps;
    row["validation"] = metric_to_json(entry.validation);
    report["samples"].push_back(row);
  }
  report["selected"] = result.selected;
  report["test"] = metric_to_json(result.test);
  write_text_file(run_path(run, "reports/finetune.json"), report.dump(2) + "\n");
  run.artifacts.push_back("reports/finetune.json");

  *run.out << "selected sample " << result.selected << " with validation "
           << result.entries[result.selected].validation.value << "; test "
           << result.test.value;
  if (result.test.ci_half_width >= 0.0) {
    *run.out << " +/- " << result.test.ci_half_width;
  }
  *run.out << " on " << result.test.n << " examples\n";
}

inline void run_finetune(CliRun& run) {
  const auto& section = run.config.finetune;
  if (!section.present) fail(ErrorKind::config, "config has no finetune section");
  require_path(section.encoder_checkpoint, "encoder_checkpoint", "finetune");
  require_path(section.train, "train", "finetune");
  require_path(section.validation, "validation", "finetune");
  require_path(section.test, "test", "finetune");
  prepare_run_dir(run);

  if (section.spec.kind == TaskKind::sequence_classification) {
    finetune_with<SequenceExample>(run, &load_sequence_examples);
  } else {
    finetune_with<TokenExample>(run, &load_token_examples);
  }
}

inline void run_eval_pppl(CliRun& run) {
  const auto& section = run.config.eval;
  if (!section.present) fail(ErrorKind::config, "config has no eval section");
  require_path(section.checkpoint, "checkpoint", "eval");
  require_path(section.sequences, "sequences", "eval");
  prepare_run_dir(run);

  const Tokenizer tokenizer = load_tokenizer_files(run);
  const EncoderModel model = load_checkpoint(section.checkpoint);
  const std::vector<std::string> sequences = read_corpus_lines(section.sequences);
  const PpplResult result = pseudo_perplexity(model, sequences, tokenizer);

  nlohmann::json report;
  report["pppl"] = result.pppl;
  report["sequences"] = result.sequences;
  report["predictions"] = result.predictions;
  write_text_file(run_path(run, "reports/pppl.json"), report.dump(2) + "\n");
  run.artifacts.push_back("reports/pppl.json");

  *run.out << "pseudo-perplexity " << result.pppl << " over " << result.sequences
           << " sequences (" << result.predictions << " predictions)\n";
}

inline void run_eval_bias(CliRun& run) {
  const auto& section = run.config.eval;
  if (!section.present) fail(ErrorKind::config, "config has no eval section");
  require_path(section.checkpoint, "checkpoint", "eval");
  require_path(section.templates, "templates", "eval");
  if (section.target_1.empty() || section.target_2.empty()) {
    fail(ErrorKind::config, "eval needs target_1 and target_2");
  }
  prepare_run_dir(run);

  const Tokenizer tokenizer = load_tokenizer_files(run);
  const EncoderModel model = load_checkpoint(section.checkpoint);
  const std::vector<BiasTemplate> templates = load_bias_templates(section.templates);
  const BiasScoreReport report =
      bias_score(model, tokenizer, templates, section.target_1, section.target_2);

  write_text_file(run_path(run, "reports/bias.csv"), bias_report_csv(report));
  run.artifacts.push_back("reports/bias.csv");

  std::size_t clamped = 0;
  for (const BiasScoreEntry& entry : report.entries) {
    if (entry.clamped) ++clamped;
  }
  *run.out << "bias score " << report.aggregate << " for \"" << section.target_1
           << "\" vs \"" << section.target_2 << "\" over " << report.entries.size()
           << " templates";
  if (clamped > 0) *run.out << " (" << clamped << " clamped)";
  *run.out << '\n';
}

struct ReferenceModel {
  std::size_t d, a, h, i;
  std::size_t parameters;
};

/// Published sizes this implementation is expected to land near.
inline const std::vector<ReferenceModel>& reference_models() {
  static const std::vector<ReferenceModel> models = {
      {12, 12, 768, 3072, 116000000},
      {6, 12, 768, 3072, 74000000},
      {4, 8, 768, 768, 46000000},
  };
  return models;
}

inline void print_parameter_row(std::ostream& out, const char* name,
                                const EncoderConfig& config) {
  const std::size_t count = count_parameters(config);
  out << name << ": " << count << " parameters (d=" << config.d << ", a=" << config.a
      << ", h=" << config.h << ", i=" << config.i << ", v=" << config.vocab_size << ")";
  for (const ReferenceModel& ref : reference_models()) {
    if (ref.d == config.d && ref.a == config.a && ref.h == config.h && ref.i == config.i) {
      const double delta = 100.0 *
                           (static_cast<double>(count) - static_cast<double>(ref.parameters)) /
                           static_cast<double>(ref.parameters);
      out << ", reference " << ref.parameters << " (" << std::showpos << std::fixed
          << std::setprecision(2) << delta << std::noshowpos << "%)";
      out.unsetf(std::ios::fixed);
      out << std::setprecision(6);
      break;
    }
  }
  out << '\n';
}

inline void run_params(CliRun& run) {
  const auto& section = run.config.model;
  if (!section.present || (!section.teacher_present && !section.student_present)) {
    fail(ErrorKind::config, "params needs model.teacher or model.student");
  }
  if (section.teacher_present) print_parameter_row(*run.out, "teacher", section.teacher);
  if (section.student_present) print_parameter_row(*run.out, "student", section.student);
}

inline void run_stats(CliRun& run) {
  const auto& section = run.config.corpus;
  if (!section.present) fail(ErrorKind::config, "config has no corpus section");
  require_path(section.input, "input", "corpus");
  prepare_run_dir(run);

  const Tokenizer tokenizer = load_tokenizer_files(run);
  MergePolicy policy;
  policy.p = run.has_merge_p ? run.merge_p : section.merge_p;
  policy.seed = run.has_seed ? run.seed : section.merge_seed;
  const std::vector<SequenceRecord> records =
      merge_sequences(load_documents(section.input), policy);

  const LengthHistogram histogram =
      length_histogram(records, tokenizer, section.bin_width, section.length_cutoff);
  write_text_file(run_path(run, "reports/length_histogram.csv"), histogram_csv(histogram));
  run.artifacts.push_back("reports/length_histogram.csv");

  *run.out << "measured " << histogram.total << " records; " << histogram.over_cutoff
           << " (" << 100.0 * histogram.over_cutoff_fraction() << "%) exceed "
           << histogram.cutoff << " tokens\n";
}

inline void dispatch(CliRun& run) {
  if (run.command != "params") {
    if (run.out_dir.empty()) fail(ErrorKind::invalid_argument, "--out is required");
  }
  if (run.command == "tokenizer-train") run_tokenizer_train(run);
  else if (run.command == "corpus-prep") run_corpus_prep(run);
  else if (run.command == "pretrain") run_pretrain(run);
  else if (run.command == "distill") run_distill(run);
  else if (run.command == "finetune") run_finetune(run);
  else if (run.command == "eval-pppl") run_eval_pppl(run);
  else if (run.command == "eval-bias") run_eval_bias(run);
  else if (run.command == "params") run_params(run);
  else if (run.command == "stats") run_stats(run);
  else fail(ErrorKind::invalid_argument, "unknown command " + run.command);
  if (run.command != "params") write_manifest(run);
}

}  // namespace detail

/// Entry point shared by the binary and the in-process tests. Output streams
/// are injectable so tests can capture them.
inline int cli_main(const std::vector<std::string>& args, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"desk-scale distillation toolkit for masked language models"};
  app.require_subcommand(1);

  detail::CliRun run;
  run.out = &out;

  const std::vector<std::string> commands = {
      "tokenizer-train", "corpus-prep", "pretrain",  "distill", "finetune",
      "eval-pppl",       "eval-bias",   "params",    "stats"};
  const std::vector<std::string> descriptions = {
      "learn a BPE vocabulary and merge table from a corpus",
      "merge, shuffle and shard a document corpus",
      "masked language model pre-training",
      "distill a student model against a frozen teacher",
      "hyperparameter search fine-tuning on a labelled task",
      "pseudo-perplexity of a checkpoint over held-out sequences",
      "template-based association bias score for two target words",
      "parameter counts for the configured models",
      "sequence length histogram of a prepared corpus"};

  for (std::size_t i = 0; i < commands.size(); ++i) {
    CLI::App* sub = app.add_subcommand(commands[i], descriptions[i]);
    sub->add_option("--config", run.config_path, "JSON run configuration")->required();
    if (commands[i] != "params") {
      sub->add_option("--out", run.out_dir, "run directory to create")->required();
    }
    CLI::Option* seed_option =
        sub->add_option("--seed", run.seed, "override the configured seed");
    CLI::Option* merge_option = nullptr;
    if (commands[i] == "corpus-prep" || commands[i] == "stats") {
      merge_option = sub->add_option("--merge-p", run.merge_p, "override corpus.merge_p");
    }
    sub->callback([&run, seed_option, merge_option, name = commands[i]]() {
      run.command = name;
      run.has_seed = seed_option->count() > 0;
      run.has_merge_p = merge_option != nullptr && merge_option->count() > 0;
    });
  }

  try {
    std::vector<const char*> argv;
    argv.push_back("distillforge");
    for (const std::string& arg : args) argv.push_back(arg.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      return app.exit(e, out, err);
    }
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    run.config = load_run_config(run.config_path, &run.raw_config);
    detail::dispatch(run);
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace distillforge
