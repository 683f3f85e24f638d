#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "distillforge/common.hpp"
#include "distillforge/corpus.hpp"
#include "distillforge/encoder.hpp"
#include "distillforge/losses.hpp"
#include "distillforge/tokenizer.hpp"

namespace distillforge {

struct PpplResult {
  double pppl = 0.0;
  std::size_t sequences = 0;
  std::size_t predictions = 0;
  std::vector<double> per_sequence;
};

/// Pseudo-perplexity: every ordinary token of each sequence is masked in
/// turn and the true token's probability scored; the result is
/// exp(total NLL / total predictions). Sequences whose encoding carries no
/// ordinary tokens score 1 and add no predictions.
inline PpplResult pseudo_perplexity(const EncoderModel& model,
                                    const std::vector<std::string>& sequences,
                                    const Tokenizer& tokenizer) {
  if (sequences.empty()) {
    fail(ErrorKind::invalid_argument, "pseudo_perplexity: no sequences");
  }

  std::vector<double> seq_nll(sequences.size(), 0.0);
  std::vector<std::size_t> seq_count(sequences.size(), 0);

  parallel_for(sequences.size(), [&](std::size_t s) {
    const std::vector<std::int32_t> ids = tokenizer.encode(sequences[s]);
    if (ids.size() > model.config.max_positions) {
      fail(ErrorKind::data, "sequence " + std::to_string(s) + " encodes to " +
                                std::to_string(ids.size()) + " tokens, model limit is " +
                                std::to_string(model.config.max_positions));
    }
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] > kMaskId) positions.push_back(i);
    }
    if (positions.empty()) return;

    IdBatch batch;
    batch.batch = positions.size();
    batch.len = ids.size();
    batch.ids.resize(positions.size() * ids.size());
    for (std::size_t v = 0; v < positions.size(); ++v) {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        batch.ids[v * ids.size() + i] = (i == positions[v]) ? kMaskId : ids[i];
      }
    }
    const std::vector<std::uint8_t> mask(batch.ids.size(), 1);
    const ForwardResult out = forward(model, batch, mask);
    const Tensor logits = mlm_logits(model, out.final_hidden());

    double nll = 0.0;
    for (std::size_t v = 0; v < positions.size(); ++v) {
      const std::size_t row = v * ids.size() + positions[v];
      nll -= log_softmax_at(logits, row, static_cast<std::size_t>(ids[positions[v]]));
    }
    seq_nll[s] = nll;
    seq_count[s] = positions.size();
  });

  PpplResult result;
  result.sequences = sequences.size();
  result.per_sequence.resize(sequences.size());
  double total_nll = 0.0;
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    total_nll += seq_nll[s];
    result.predictions += seq_count[s];
    result.per_sequence[s] =
        seq_count[s] == 0 ? 1.0 : std::exp(seq_nll[s] / static_cast<double>(seq_count[s]));
  }
  if (result.predictions == 0) {
    fail(ErrorKind::data, "pseudo_perplexity: no scorable tokens in any sequence");
  }
  result.pppl = std::exp(total_nll / static_cast<double>(result.predictions));
  return result;
}

/// A template line: words, one `<mask>` slot, attribute words marked by
/// surrounding `[[` `]]` in the source text.
struct BiasTemplate {
  std::string text;
  std::vector<std::string> words;
  std::size_t slot_word = 0;
  std::vector<std::size_t> attribute_words;
};

inline BiasTemplate parse_bias_template(const std::string& line) {
  BiasTemplate tmpl;
  tmpl.text = line;
  bool in_attribute = false;
  bool found_slot = false;
  for (std::string word : detail::split_words(line)) {
    bool starts = false;
    bool ends = false;
    if (word.rfind("[[", 0) == 0) {
      starts = true;
      word = word.substr(2);
    }
    if (word.size() >= 2 && word.compare(word.size() - 2, 2, "]]") == 0) {
      ends = true;
      word = word.substr(0, word.size() - 2);
    }
    if (starts && in_attribute) {
      fail(ErrorKind::parse, "nested [[ in template: " + line);
    }
    if (ends && !starts && !in_attribute) {
      fail(ErrorKind::parse, "unmatched ]] in template: " + line);
    }
    if (word.empty()) {
      fail(ErrorKind::parse, "empty word inside attribute markers: " + line);
    }
    const bool is_attribute = starts || in_attribute;
    in_attribute = (starts || in_attribute) && !ends;

    if (word == "<mask>") {
      if (found_slot) {
        fail(ErrorKind::parse, "template has more than one <mask> slot: " + line);
      }
      if (is_attribute) {
        fail(ErrorKind::parse, "the <mask> slot cannot be an attribute: " + line);
      }
      found_slot = true;
      tmpl.slot_word = tmpl.words.size();
    } else if (is_attribute) {
      tmpl.attribute_words.push_back(tmpl.words.size());
    }
    tmpl.words.push_back(word);
  }
  if (in_attribute) {
    fail(ErrorKind::parse, "unterminated [[ in template: " + line);
  }
  if (!found_slot) {
    fail(ErrorKind::parse, "template has no <mask> slot: " + line);
  }
  if (tmpl.attribute_words.empty()) {
    fail(ErrorKind::parse, "template has no [[attribute]] words: " + line);
  }
  return tmpl;
}

/// One template per non-blank line.
inline std::vector<BiasTemplate> load_bias_templates(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::vector<BiasTemplate> templates;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::is_blank(line)) continue;
    templates.push_back(parse_bias_template(line));
  }
  return templates;
}

struct AssociationResult {
  double log_ratio = 0.0;
  bool clamped = false;
};

namespace detail {

/// Token ids for a template with the slot masked; records the slot's token
/// position and the token positions of every attribute word.
struct TemplateEncoding {
  std::vector<std::int32_t> ids;
  std::size_t slot_pos = 0;
  std::vector<std::size_t> attribute_pos;
};

inline TemplateEncoding encode_template(const BiasTemplate& tmpl, const Tokenizer& tokenizer) {
  TemplateEncoding enc;
  enc.ids.push_back(kBosId);
  for (std::size_t w = 0; w < tmpl.words.size(); ++w) {
    if (w == tmpl.slot_word) {
      enc.slot_pos = enc.ids.size();
      enc.ids.push_back(kMaskId);
      continue;
    }
    const bool is_attr = std::find(tmpl.attribute_words.begin(), tmpl.attribute_words.end(),
                                   w) != tmpl.attribute_words.end();
    for (const auto& piece : segment_word(tmpl.words[w], tokenizer.merges)) {
      if (is_attr) enc.attribute_pos.push_back(enc.ids.size());
      enc.ids.push_back(tokenizer.vocab.id_of(piece));
    }
  }
  enc.ids.push_back(kEosId);
  return enc;
}

inline double slot_probability(const EncoderModel& model, const std::vector<std::int32_t>& ids,
                               std::size_t slot_pos, std::int32_t target_id) {
  IdBatch batch;
  batch.batch = 1;
  batch.len = ids.size();
  batch.ids = ids;
  const std::vector<std::uint8_t> mask(ids.size(), 1);
  const ForwardResult out = forward(model, batch, mask);
  const Tensor logits = mlm_logits(model, out.final_hidden());
  return std::exp(log_softmax_at(logits, slot_pos, static_cast<std::size_t>(target_id)));
}

}  // namespace detail

/// Resolves a target word to its single token id; multi-piece or
/// out-of-vocabulary targets are rejected.
inline std::int32_t single_token_id(const std::string& target, const Tokenizer& tokenizer) {
  const std::vector<std::string> pieces = tokenize_pieces(target, tokenizer.merges);
  if (pieces.size() != 1) {
    fail(ErrorKind::invalid_argument, "target \"" + target + "\" encodes to " +
                                          std::to_string(pieces.size()) +
                                          " tokens, need exactly 1");
  }
  if (!tokenizer.vocab.contains(pieces[0])) {
    fail(ErrorKind::invalid_argument,
         "target \"" + target + "\" is outside the vocabulary");
  }
  return tokenizer.vocab.id_of(pieces[0]);
}

/// log(p_tgt / p_prior) for a target in a template: p_tgt masks only the
/// slot, p_prior additionally masks every attribute token. Probabilities
/// are floored at 1e-12; `clamped` reports when the floor fired.
inline AssociationResult log_prob_association(const EncoderModel& model,
                                              const Tokenizer& tokenizer,
                                              const BiasTemplate& tmpl,
                                              const std::string& target) {
  const std::int32_t target_id = single_token_id(target, tokenizer);
  const detail::TemplateEncoding enc = detail::encode_template(tmpl, tokenizer);
  if (enc.ids.size() > model.config.max_positions) {
    fail(ErrorKind::data, "template encodes to " + std::to_string(enc.ids.size()) +
                              " tokens, model limit is " +
                              std::to_string(model.config.max_positions));
  }

  constexpr double kFloor = 1e-12;
  AssociationResult result;
  double p_tgt = detail::slot_probability(model, enc.ids, enc.slot_pos, target_id);

  std::vector<std::int32_t> prior_ids = enc.ids;
  for (const std::size_t pos : enc.attribute_pos) prior_ids[pos] = kMaskId;
  double p_prior = detail::slot_probability(model, prior_ids, enc.slot_pos, target_id);

  if (p_tgt < kFloor) {
    p_tgt = kFloor;
    result.clamped = true;
  }
  if (p_prior < kFloor) {
    p_prior = kFloor;
    result.clamped = true;
  }
  result.log_ratio = std::log(p_tgt / p_prior);
  return result;
}

struct BiasScoreEntry {
  std::string template_text;
  double assoc_t1 = 0.0;
  double assoc_t2 = 0.0;
  double score = 0.0;
  bool clamped = false;
};

struct BiasScoreReport {
  std::vector<BiasScoreEntry> entries;
  double aggregate = 0.0;
};

/// Per-template score = association(t1) - association(t2); aggregate is the
/// mean. Swapping the targets negates every entry.
inline BiasScoreReport bias_score(const EncoderModel& model, const Tokenizer& tokenizer,
                                  const std::vector<BiasTemplate>& templates,
                                  const std::string& t1, const std::string& t2) {
  if (templates.empty()) {
    fail(ErrorKind::invalid_argument, "bias_score: no templates");
  }
  BiasScoreReport report;
  report.entries.resize(templates.size());
  parallel_for(templates.size(), [&](std::size_t i) {
    const AssociationResult a1 = log_prob_association(model, tokenizer, templates[i], t1);
    const AssociationResult a2 = log_prob_association(model, tokenizer, templates[i], t2);
    BiasScoreEntry& entry = report.entries[i];
    entry.template_text = templates[i].text;
    entry.assoc_t1 = a1.log_ratio;
    entry.assoc_t2 = a2.log_ratio;
    entry.score = a1.log_ratio - a2.log_ratio;
    entry.clamped = a1.clamped || a2.clamped;
  });
  double sum = 0.0;
  for (const auto& entry : report.entries) sum += entry.score;
  report.aggregate = sum / static_cast<double>(report.entries.size());
  return report;
}

namespace detail {

inline std::string csv_quote(const std::string& field) {
  std::string out = "\"";
  for (const char c : field) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

}  // namespace detail

/// Rows "template,assoc_t1,assoc_t2,score" plus an aggregate line.
inline std::string bias_report_csv(const BiasScoreReport& report) {
  std::string out = "template,assoc_t1,assoc_t2,score\n";
  for (const auto& entry : report.entries) {
    out += detail::csv_quote(entry.template_text) + ',' + std::to_string(entry.assoc_t1) +
           ',' + std::to_string(entry.assoc_t2) + ',' + std::to_string(entry.score) + '\n';
  }
  out += "aggregate,,," + std::to_string(report.aggregate) + '\n';
  return out;
}

}  // namespace distillforge
