#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "distillforge/common.hpp"

namespace distillforge {

constexpr std::int32_t kPadId = 0;
constexpr std::int32_t kBosId = 1;
constexpr std::int32_t kEosId = 2;
constexpr std::int32_t kUnkId = 3;
constexpr std::int32_t kMaskId = 4;

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials = {"<pad>", "<s>", "</s>", "<unk>",
                                                    "<mask>"};
  return specials;
}

/// Word-initial marker (U+2581). Words carry it as their first symbol so the
/// decoder can restore single spaces between words.
inline const std::string& word_marker() {
  static const std::string marker = "\xE2\x96\x81";
  return marker;
}

/// Token-string to id map with fixed special ids. Ordinary ids follow the
/// specials densely, so line number equals id in the saved file.
class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& tok : special_tokens()) add(tok);
  }

  std::int32_t add(const std::string& token) {
    auto [it, inserted] = token_to_id_.emplace(token, static_cast<std::int32_t>(id_to_token_.size()));
    if (!inserted) {
      fail(ErrorKind::invalid_argument, "vocabulary already contains \"" + token + "\"");
    }
    id_to_token_.push_back(token);
    return it->second;
  }

  std::size_t size() const { return id_to_token_.size(); }

  bool contains(const std::string& token) const {
    return token_to_id_.count(token) != 0;
  }

  std::int32_t id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
      fail(ErrorKind::data, "token id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(id_to_token_.size()));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::int32_t> token_to_id_;
};

/// Ordered merge rules; position is priority (lower merges first).
class MergeTable {
 public:
  void add(std::string left, std::string right) {
    const std::string key = pair_key(left, right);
    auto [it, inserted] = rank_.emplace(key, rules_.size());
    if (!inserted) {
      fail(ErrorKind::invalid_argument, "duplicate merge rule \"" + left + " " + right + "\"");
    }
    rules_.emplace_back(std::move(left), std::move(right));
  }

  std::size_t size() const { return rules_.size(); }
  const std::vector<std::pair<std::string, std::string>>& rules() const { return rules_; }

  /// Priority of a pair, or npos when the pair is not a rule.
  std::size_t rank(const std::string& left, const std::string& right) const {
    auto it = rank_.find(pair_key(left, right));
    return it == rank_.end() ? npos : it->second;
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  static std::string pair_key(const std::string& left, const std::string& right) {
    std::string key;
    key.reserve(left.size() + right.size() + 1);
    key += left;
    key += '\x01';
    key += right;
    return key;
  }

  std::vector<std::pair<std::string, std::string>> rules_;
  std::unordered_map<std::string, std::size_t> rank_;
};

namespace detail {

/// Splits UTF-8 into code-point strings; a stray continuation byte becomes
/// its own one-byte symbol rather than an error.
inline std::vector<std::string> utf8_symbols(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto lead = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if ((lead & 0xE0) == 0xC0) len = 2;
    else if ((lead & 0xF0) == 0xE0) len = 3;
    else if ((lead & 0xF8) == 0xF0) len = 4;
    len = std::min(len, word.size() - i);
    std::size_t take = 1;
    while (take < len && (static_cast<unsigned char>(word[i + take]) & 0xC0) == 0x80) ++take;
    out.emplace_back(word.substr(i, take));
    i += take;
  }
  return out;
}

inline bool is_space_byte(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space_byte(text[i])) ++i;
    std::size_t start = i;
    while (i < text.size() && !is_space_byte(text[i])) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

/// Symbol sequence for one word: the marker, then the word's code points.
inline std::vector<std::string> word_symbols(const std::string& word) {
  std::vector<std::string> symbols;
  symbols.push_back(word_marker());
  auto chars = utf8_symbols(word);
  symbols.insert(symbols.end(), chars.begin(), chars.end());
  return symbols;
}

inline void merge_in_place(std::vector<std::string>& symbols, const std::string& left,
                           const std::string& right) {
  std::size_t write = 0;
  std::size_t read = 0;
  while (read < symbols.size()) {
    if (read + 1 < symbols.size() && symbols[read] == left && symbols[read + 1] == right) {
      symbols[write++] = left + right;
      read += 2;
    } else {
      if (write != read) symbols[write] = std::move(symbols[read]);
      ++write;
      ++read;
    }
  }
  symbols.resize(write);
}

inline bool is_special_string(const std::string& s) {
  const auto& specials = special_tokens();
  return std::find(specials.begin(), specials.end(), s) != specials.end();
}

}  // namespace detail

/// Learns merge rules by greedy highest-frequency pair merging. Ties break
/// toward the lexicographically smallest pair so training is deterministic.
/// Stops when the vocabulary reaches the target or no pair occurs twice.
inline std::pair<Vocabulary, MergeTable> train_bpe(const std::vector<std::string>& corpus,
                                                   std::size_t target_vocab_size) {
  std::map<std::string, std::size_t> word_counts;
  for (const auto& line : corpus) {
    for (auto& word : detail::split_words(line)) ++word_counts[word];
  }
  if (word_counts.empty()) {
    fail(ErrorKind::invalid_argument, "train_bpe: corpus contains no words");
  }

  std::map<std::string, std::size_t> alphabet;
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  words.reserve(word_counts.size());
  for (const auto& [word, count] : word_counts) {
    auto symbols = detail::word_symbols(word);
    for (const auto& s : symbols) ++alphabet[s];
    words.emplace_back(std::move(symbols), count);
  }

  Vocabulary vocab;
  const std::size_t base_size = vocab.size() + alphabet.size();
  if (target_vocab_size <= base_size) {
    fail(ErrorKind::invalid_argument,
         "train_bpe: target vocabulary " + std::to_string(target_vocab_size) +
             " does not exceed " + std::to_string(base_size) +
             " base symbols plus specials");
  }
  for (const auto& [symbol, count] : alphabet) {
    (void)count;
    vocab.add(symbol);
  }

  MergeTable merges;
  while (vocab.size() < target_vocab_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (const auto& [symbols, count] : words) {
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        pair_counts[{symbols[i], symbols[i + 1]}] += count;
      }
    }
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (detail::is_special_string(pair.first + pair.second)) continue;
      if (vocab.contains(pair.first + pair.second)) continue;
      if (count > best_count) {
        best_count = count;
        best = &pair;
      }
    }
    if (best == nullptr || best_count < 2) break;
    merges.add(best->first, best->second);
    vocab.add(best->first + best->second);
    for (auto& [symbols, count] : words) {
      (void)count;
      detail::merge_in_place(symbols, best->first, best->second);
    }
  }
  return {std::move(vocab), std::move(merges)};
}

namespace detail {

/// Applies merge rules to one word by repeatedly merging the best-ranked
/// adjacent pair, the standard BPE segmentation.
inline std::vector<std::string> segment_word(const std::string& word,
                                             const MergeTable& merges) {
  auto symbols = word_symbols(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = MergeTable::npos;
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const std::size_t r = merges.rank(symbols[i], symbols[i + 1]);
      if (r < best_rank) {
        best_rank = r;
        best_pos = i;
      }
    }
    if (best_rank == MergeTable::npos) break;
    symbols[best_pos] += symbols[best_pos + 1];
    symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
  }
  return symbols;
}

}  // namespace detail

/// Token pieces for a text, without specials. Exposed for tests and the
/// length histogram.
inline std::vector<std::string> tokenize_pieces(const std::string& text,
                                                const MergeTable& merges) {
  std::vector<std::string> pieces;
  for (const auto& word : detail::split_words(text)) {
    auto symbols = detail::segment_word(word, merges);
    pieces.insert(pieces.end(), std::make_move_iterator(symbols.begin()),
                  std::make_move_iterator(symbols.end()));
  }
  return pieces;
}

/// Text to ids, wrapped in begin/end specials. Symbols outside the
/// vocabulary map to the unknown id.
inline std::vector<std::int32_t> encode(const std::string& text, const Vocabulary& vocab,
                                        const MergeTable& merges) {
  std::vector<std::int32_t> ids;
  ids.push_back(kBosId);
  for (const auto& piece : tokenize_pieces(text, merges)) {
    ids.push_back(vocab.id_of(piece));
  }
  ids.push_back(kEosId);
  return ids;
}

/// Ids back to text. Padding and sequence delimiters are dropped; unknown
/// and mask render as their literal token strings. Word markers become
/// single spaces.
inline std::string decode(const std::vector<std::int32_t>& ids, const Vocabulary& vocab) {
  std::string joined;
  for (const std::int32_t id : ids) {
    const std::string& tok = vocab.token(id);
    if (id == kPadId || id == kBosId || id == kEosId) continue;
    joined += tok;
  }
  std::string out;
  out.reserve(joined.size());
  std::size_t i = 0;
  const std::string& marker = word_marker();
  while (i < joined.size()) {
    if (joined.compare(i, marker.size(), marker) == 0) {
      if (!out.empty()) out += ' ';
      i += marker.size();
    } else {
      out += joined[i];
      ++i;
    }
  }
  return out;
}

inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  for (const auto& token : vocab.tokens()) out << token << '\n';
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  Vocabulary vocab;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no < special_tokens().size()) {
      if (line != special_tokens()[line_no]) {
        fail(ErrorKind::parse, path + ": line " + std::to_string(line_no + 1) +
                                   " must be the special token \"" +
                                   special_tokens()[line_no] + "\", got \"" + line + "\"");
      }
    } else {
      if (line.empty()) {
        fail(ErrorKind::parse, path + ": empty token at line " + std::to_string(line_no + 1));
      }
      vocab.add(line);
    }
    ++line_no;
  }
  if (line_no < special_tokens().size()) {
    fail(ErrorKind::parse, path + ": vocabulary shorter than the special token block");
  }
  return vocab;
}

inline void save_merges(const MergeTable& merges, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot open " + path + " for writing");
  for (const auto& [left, right] : merges.rules()) out << left << ' ' << right << '\n';
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

inline MergeTable load_merges(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  MergeTable merges;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t space = line.find(' ');
    if (space == std::string::npos || space == 0 || space + 1 >= line.size() ||
        line.find(' ', space + 1) != std::string::npos) {
      fail(ErrorKind::parse,
           path + ": line " + std::to_string(line_no) + " is not \"left right\"");
    }
    merges.add(line.substr(0, space), line.substr(space + 1));
  }
  return merges;
}

/// Trained tokenizer bundle.
struct Tokenizer {
  Vocabulary vocab;
  MergeTable merges;

  std::vector<std::int32_t> encode(const std::string& text) const {
    return distillforge::encode(text, vocab, merges);
  }
  std::string decode(const std::vector<std::int32_t>& ids) const {
    return distillforge::decode(ids, vocab);
  }
  std::size_t vocab_size() const { return vocab.size(); }

  void save(const std::string& vocab_path, const std::string& merges_path) const {
    save_vocabulary(vocab, vocab_path);
    save_merges(merges, merges_path);
  }
  static Tokenizer load(const std::string& vocab_path, const std::string& merges_path) {
    return Tokenizer{load_vocabulary(vocab_path), load_merges(merges_path)};
  }
};

}  // namespace distillforge
