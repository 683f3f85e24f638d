#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "distillforge/common.hpp"
#include "distillforge/tokenizer.hpp"

namespace distillforge {

struct Document {
  std::size_t doc_id = 0;
  std::vector<std::string> lines;
};

struct SequenceRecord {
  std::string text;
  std::size_t source_doc = 0;
  std::size_t merged_from = 1;

  bool operator==(const SequenceRecord& other) const {
    return text == other.text && source_doc == other.source_doc &&
           merged_from == other.merged_from;
  }
};

struct MergePolicy {
  double p = 0.5;
  std::uint64_t seed = 0;
};

struct LengthHistogram {
  std::size_t bin_width = 0;
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  std::size_t cutoff = 0;
  std::size_t over_cutoff = 0;

  double over_cutoff_fraction() const {
    return total == 0 ? 0.0 : static_cast<double>(over_cutoff) / static_cast<double>(total);
  }
};

namespace detail {

/// Byte offset of the first structurally invalid UTF-8 byte, or npos.
inline std::size_t first_invalid_utf8(const std::string& data) {
  std::size_t i = 0;
  while (i < data.size()) {
    const auto b = static_cast<unsigned char>(data[i]);
    std::size_t follow = 0;
    if (b < 0x80) follow = 0;
    else if ((b & 0xE0) == 0xC0) follow = 1;
    else if ((b & 0xF0) == 0xE0) follow = 2;
    else if ((b & 0xF8) == 0xF0) follow = 3;
    else return i;
    if (i + follow >= data.size() && follow > 0) return i;
    for (std::size_t j = 1; j <= follow; ++j) {
      if ((static_cast<unsigned char>(data[i + j]) & 0xC0) != 0x80) return i + j;
    }
    i += follow + 1;
  }
  return static_cast<std::size_t>(-1);
}

inline bool is_blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return is_space_byte(c); });
}

}  // namespace detail

/// Reads blank-line-delimited documents. Non-blank lines become sequences in
/// source order; runs of blank lines separate documents.
inline std::vector<Document> load_documents(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::io, "read failed for " + path);
  const std::size_t bad = detail::first_invalid_utf8(data);
  if (bad != static_cast<std::size_t>(-1)) {
    fail(ErrorKind::parse, path + ": invalid UTF-8 at byte offset " + std::to_string(bad));
  }

  std::vector<Document> docs;
  Document current;
  std::size_t start = 0;
  auto flush_line = [&](std::size_t end) {
    std::string line = data.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::is_blank(line)) {
      if (!current.lines.empty()) {
        current.doc_id = docs.size();
        docs.push_back(std::move(current));
        current = Document{};
      }
    } else {
      current.lines.push_back(std::move(line));
    }
  };
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i] == '\n') {
      flush_line(i);
      start = i + 1;
    }
  }
  if (start < data.size()) flush_line(data.size());
  if (!current.lines.empty()) {
    current.doc_id = docs.size();
    docs.push_back(std::move(current));
  }
  return docs;
}

/// Merges each document's lines into records by a chaining rule: after a line
/// is appended, a Bernoulli(p) success appends the document's next line to
/// the same record, a failure closes it. Lines join with a single space.
/// Never crosses document boundaries.
inline std::vector<SequenceRecord> merge_sequences(const std::vector<Document>& docs,
                                                   const MergePolicy& policy) {
  if (policy.p < 0.0 || policy.p > 1.0) {
    fail(ErrorKind::invalid_argument,
         "merge probability must lie in [0, 1], got " + std::to_string(policy.p));
  }
  Rng rng(policy.seed);
  std::vector<SequenceRecord> records;
  for (const auto& doc : docs) {
    std::size_t i = 0;
    while (i < doc.lines.size()) {
      SequenceRecord record;
      record.source_doc = doc.doc_id;
      record.text = doc.lines[i];
      record.merged_from = 1;
      ++i;
      while (i < doc.lines.size() && bernoulli(rng, policy.p)) {
        record.text += ' ';
        record.text += doc.lines[i];
        ++record.merged_from;
        ++i;
      }
      records.push_back(std::move(record));
    }
  }
  return records;
}

/// Seed-deterministic Fisher-Yates permutation.
template <typename T>
std::vector<T> shuffle_records(std::vector<T> records, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = records.size(); i > 1; --i) {
    const std::size_t j = uniform_index(rng, i);
    std::swap(records[i - 1], records[j]);
  }
  return records;
}

/// Token-count histogram over encoded records (specials included) plus the
/// fraction of records longer than the cutoff.
inline LengthHistogram length_histogram(const std::vector<SequenceRecord>& records,
                                        const Tokenizer& tokenizer, std::size_t bin_width,
                                        std::size_t cutoff) {
  if (bin_width == 0) {
    fail(ErrorKind::invalid_argument, "length_histogram: bin width must be positive");
  }
  LengthHistogram hist;
  hist.bin_width = bin_width;
  hist.cutoff = cutoff;
  hist.total = records.size();

  std::vector<std::size_t> lengths(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    lengths[i] = tokenizer.encode(records[i].text).size();
  });
  for (const std::size_t len : lengths) {
    const std::size_t bin = len / bin_width;
    if (bin >= hist.counts.size()) hist.counts.resize(bin + 1, 0);
    ++hist.counts[bin];
    if (len > cutoff) ++hist.over_cutoff;
  }
  return hist;
}

/// CSV rows "bin_start,bin_end,count" followed by a summary line with the
/// over-cutoff fraction.
inline std::string histogram_csv(const LengthHistogram& hist) {
  std::string out = "bin_start,bin_end,count\n";
  for (std::size_t b = 0; b < hist.counts.size(); ++b) {
    out += std::to_string(b * hist.bin_width) + ',' +
           std::to_string((b + 1) * hist.bin_width) + ',' + std::to_string(hist.counts[b]) +
           '\n';
  }
  out += "total=" + std::to_string(hist.total) + " over_" + std::to_string(hist.cutoff) +
         "=" + std::to_string(hist.over_cutoff_fraction()) + "\n";
  return out;
}

/// Keeps the leading token and the final max_len-1 tokens of an overlong
/// sequence, so the end of the text survives truncation.
inline std::vector<std::int32_t> truncate_keep_last(std::vector<std::int32_t> ids,
                                                    std::size_t max_len) {
  if (max_len < 2) {
    fail(ErrorKind::invalid_argument,
         "truncate_keep_last: max_len must be at least 2, got " + std::to_string(max_len));
  }
  if (ids.size() <= max_len) return ids;
  std::vector<std::int32_t> out;
  out.reserve(max_len);
  out.push_back(ids.front());
  out.insert(out.end(), ids.end() - static_cast<std::ptrdiff_t>(max_len - 1), ids.end());
  return out;
}

/// Contiguous order-preserving partition into n shards with sizes as equal
/// as possible (earlier shards take the remainder).
template <typename T>
std::vector<std::vector<T>> split_shards(const std::vector<T>& records, std::size_t n_shards) {
  if (n_shards == 0) {
    fail(ErrorKind::invalid_argument, "split_shards: shard count must be positive");
  }
  if (n_shards > records.size()) {
    fail(ErrorKind::invalid_argument,
         "split_shards: " + std::to_string(n_shards) + " shards for " +
             std::to_string(records.size()) + " records");
  }
  const std::size_t base = records.size() / n_shards;
  const std::size_t rem = records.size() % n_shards;
  std::vector<std::vector<T>> shards;
  shards.reserve(n_shards);
  std::size_t pos = 0;
  for (std::size_t s = 0; s < n_shards; ++s) {
    const std::size_t take = base + (s < rem ? 1 : 0);
    shards.emplace_back(records.begin() + static_cast<std::ptrdiff_t>(pos),
                        records.begin() + static_cast<std::ptrdiff_t>(pos + take));
    pos += take;
  }
  return shards;
}

/// The final n records in order.
template <typename T>
std::vector<T> take_last_shard(const std::vector<T>& records, std::size_t n) {
  if (n > records.size()) {
    fail(ErrorKind::invalid_argument,
         "take_last_shard: asked for " + std::to_string(n) + " of " +
             std::to_string(records.size()) + " records");
  }
  return std::vector<T>(records.end() - static_cast<std::ptrdiff_t>(n), records.end());
}

}  // namespace distillforge
