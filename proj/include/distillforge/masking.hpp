#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "distillforge/common.hpp"
#include "distillforge/corpus.hpp"
#include "distillforge/tokenizer.hpp"

namespace distillforge {

struct MaskingPolicy {
  double mask_rate = 0.15;
  double mask_fraction = 0.8;
  double random_fraction = 0.1;
  std::size_t vocab_size = 0;

  void validate() const {
    if (mask_rate <= 0.0 || mask_rate >= 1.0) {
      fail(ErrorKind::invalid_argument,
           "mask rate must lie in (0, 1), got " + std::to_string(mask_rate));
    }
    if (mask_fraction < 0.0 || random_fraction < 0.0 ||
        mask_fraction + random_fraction > 1.0) {
      fail(ErrorKind::invalid_argument, "mask/random fractions must be non-negative and "
                                        "sum to at most 1");
    }
    if (vocab_size <= static_cast<std::size_t>(kMaskId) + 1) {
      fail(ErrorKind::invalid_argument, "vocabulary leaves no ordinary tokens to mask");
    }
  }
};

/// Inputs with masking applied, labels carrying the original token at every
/// selected position and the ignore index elsewhere, and the padding-derived
/// attention mask.
struct MaskedBatch {
  IdBatch inputs;
  std::vector<std::int32_t> labels;
  std::vector<std::uint8_t> attention_mask;

  std::size_t label_count() const {
    std::size_t n = 0;
    for (const std::int32_t l : labels) n += (l != kIgnoreLabel) ? 1 : 0;
    return n;
  }
};

/// Selects each ordinary token with probability mask_rate; selections become
/// the mask id, a uniform ordinary id, or stay unchanged per the policy
/// fractions. Labels hold original ids at selected positions. If a draw
/// selects nothing the whole selection is redrawn, so a returned batch always
/// has at least one label.
inline MaskedBatch apply_masking(const IdBatch& ids,
                                 const std::vector<std::uint8_t>& attention_mask,
                                 const MaskingPolicy& policy, Rng& rng) {
  policy.validate();
  if (attention_mask.size() != ids.ids.size()) {
    fail(ErrorKind::shape_mismatch, "attention mask size does not match ids");
  }
  bool any_ordinary = false;
  for (std::size_t i = 0; i < ids.ids.size(); ++i) {
    if (attention_mask[i] != 0 && ids.ids[i] > kMaskId) {
      any_ordinary = true;
      break;
    }
  }
  if (!any_ordinary) {
    fail(ErrorKind::data, "apply_masking: batch has no ordinary tokens to mask");
  }

  const std::size_t ordinary_count = policy.vocab_size - static_cast<std::size_t>(kMaskId) - 1;
  MaskedBatch batch;
  batch.attention_mask = attention_mask;
  while (true) {
    batch.inputs = ids;
    batch.labels.assign(ids.ids.size(), kIgnoreLabel);
    std::size_t selected = 0;
    for (std::size_t i = 0; i < ids.ids.size(); ++i) {
      if (attention_mask[i] == 0 || ids.ids[i] <= kMaskId) continue;
      if (!bernoulli(rng, policy.mask_rate)) continue;
      batch.labels[i] = ids.ids[i];
      ++selected;
      const double u = uniform_unit(rng);
      if (u < policy.mask_fraction) {
        batch.inputs.ids[i] = kMaskId;
      } else if (u < policy.mask_fraction + policy.random_fraction) {
        batch.inputs.ids[i] =
            static_cast<std::int32_t>(kMaskId + 1 + uniform_index(rng, ordinary_count));
      }
    }
    if (selected > 0) break;
  }
  return batch;
}

/// Seed-determinism wrapper.
inline MaskedBatch apply_masking(const IdBatch& ids,
                                 const std::vector<std::uint8_t>& attention_mask,
                                 const MaskingPolicy& policy, std::uint64_t seed) {
  Rng rng(seed);
  return apply_masking(ids, attention_mask, policy, rng);
}

/// Pads encoded sequences to a common length (at most max_len, long inputs
/// keep their tail) and derives the attention mask.
inline std::pair<IdBatch, std::vector<std::uint8_t>> make_padded_batch(
    const std::vector<std::vector<std::int32_t>>& sequences, std::size_t max_len) {
  if (sequences.empty()) {
    fail(ErrorKind::invalid_argument, "make_padded_batch: no sequences");
  }
  std::vector<std::vector<std::int32_t>> rows;
  rows.reserve(sequences.size());
  std::size_t width = 0;
  for (const auto& seq : sequences) {
    rows.push_back(seq.size() > max_len ? truncate_keep_last(seq, max_len) : seq);
    width = std::max(width, rows.back().size());
  }
  IdBatch batch;
  batch.batch = rows.size();
  batch.len = width;
  batch.ids.assign(rows.size() * width, kPadId);
  std::vector<std::uint8_t> mask(rows.size() * width, 0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      batch.ids[r * width + c] = rows[r][c];
      mask[r * width + c] = 1;
    }
  }
  return {std::move(batch), std::move(mask)};
}

}  // namespace distillforge
