#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "distillforge/common.hpp"
#include "distillforge/ops.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

struct EncoderConfig {
  std::size_t d = 2;
  std::size_t a = 2;
  std::size_t h = 32;
  std::size_t i = 64;
  std::size_t vocab_size = 64;
  std::size_t max_positions = 64;
  double dropout = 0.0;

  void validate() const {
    if (d < 1 || a < 1 || h < 1 || i < 1 || vocab_size < 1 || max_positions < 1) {
      fail(ErrorKind::config, "encoder config dimensions must all be at least 1");
    }
    if (h % a != 0) {
      fail(ErrorKind::config, "hidden size " + std::to_string(h) +
                                  " not divisible by " + std::to_string(a) + " heads");
    }
    if (dropout < 0.0 || dropout >= 1.0) {
      fail(ErrorKind::config, "dropout must lie in [0, 1), got " + std::to_string(dropout));
    }
  }

  std::size_t head_dim() const { return h / a; }

  bool operator==(const EncoderConfig& other) const {
    return d == other.d && a == other.a && h == other.h && i == other.i &&
           vocab_size == other.vocab_size && max_positions == other.max_positions &&
           dropout == other.dropout;
  }
};

inline nlohmann::json encoder_config_to_json(const EncoderConfig& config) {
  return nlohmann::json{{"d", config.d},
                        {"a", config.a},
                        {"h", config.h},
                        {"i", config.i},
                        {"vocab_size", config.vocab_size},
                        {"max_positions", config.max_positions},
                        {"dropout", config.dropout}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorKind::config, "encoder config must be a JSON object");
  static const std::vector<std::string> known = {"d", "a", "h", "i", "vocab_size",
                                                 "max_positions", "dropout"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      fail(ErrorKind::config, "unknown encoder config key \"" + key + "\"");
    }
  }
  EncoderConfig config;
  try {
    config.d = j.at("d").get<std::size_t>();
    config.a = j.at("a").get<std::size_t>();
    config.h = j.at("h").get<std::size_t>();
    config.i = j.at("i").get<std::size_t>();
    config.vocab_size = j.at("vocab_size").get<std::size_t>();
    config.max_positions = j.at("max_positions").get<std::size_t>();
    config.dropout = j.value("dropout", 0.0);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("encoder config: ") + e.what());
  }
  config.validate();
  return config;
}

template <typename S>
struct EncoderLayerT {
  TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<S> ln_attn_gain, ln_attn_bias;
  TensorT<S> w_ff_in, b_ff_in, w_ff_out, b_ff_out;
  TensorT<S> ln_ff_gain, ln_ff_bias;
};

/// BERT-like encoder with a masked-language-model head. The MLM projection
/// shares storage with the token embedding; only the output bias is separate.
/// No token-type embeddings and no pooler.
template <typename S>
struct EncoderModelT {
  EncoderConfig config;
  TensorT<S> tok_emb;
  TensorT<S> pos_emb;
  TensorT<S> emb_ln_gain, emb_ln_bias;
  std::vector<EncoderLayerT<S>> layers;
  TensorT<S> mlm_w, mlm_b;
  TensorT<S> mlm_ln_gain, mlm_ln_bias;
  TensorT<S> mlm_out_bias;

  /// Stable-ordered parameter list; names are the checkpoint tensor names.
  std::vector<std::pair<std::string, TensorT<S>*>> named_parameters() {
    std::vector<std::pair<std::string, TensorT<S>*>> params;
    params.emplace_back("tok_emb", &tok_emb);
    params.emplace_back("pos_emb", &pos_emb);
    params.emplace_back("emb_ln_gain", &emb_ln_gain);
    params.emplace_back("emb_ln_bias", &emb_ln_bias);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string base = "layer" + std::to_string(l) + ".";
      auto& layer = layers[l];
      params.emplace_back(base + "wq", &layer.wq);
      params.emplace_back(base + "bq", &layer.bq);
      params.emplace_back(base + "wk", &layer.wk);
      params.emplace_back(base + "bk", &layer.bk);
      params.emplace_back(base + "wv", &layer.wv);
      params.emplace_back(base + "bv", &layer.bv);
      params.emplace_back(base + "wo", &layer.wo);
      params.emplace_back(base + "bo", &layer.bo);
      params.emplace_back(base + "ln_attn_gain", &layer.ln_attn_gain);
      params.emplace_back(base + "ln_attn_bias", &layer.ln_attn_bias);
      params.emplace_back(base + "w_ff_in", &layer.w_ff_in);
      params.emplace_back(base + "b_ff_in", &layer.b_ff_in);
      params.emplace_back(base + "w_ff_out", &layer.w_ff_out);
      params.emplace_back(base + "b_ff_out", &layer.b_ff_out);
      params.emplace_back(base + "ln_ff_gain", &layer.ln_ff_gain);
      params.emplace_back(base + "ln_ff_bias", &layer.ln_ff_bias);
    }
    params.emplace_back("mlm_w", &mlm_w);
    params.emplace_back("mlm_b", &mlm_b);
    params.emplace_back("mlm_ln_gain", &mlm_ln_gain);
    params.emplace_back("mlm_ln_bias", &mlm_ln_bias);
    params.emplace_back("mlm_out_bias", &mlm_out_bias);
    return params;
  }

  std::vector<std::pair<std::string, const TensorT<S>*>> named_parameters() const {
    auto* self = const_cast<EncoderModelT*>(this);
    std::vector<std::pair<std::string, const TensorT<S>*>> params;
    for (auto& [name, tensor] : self->named_parameters()) params.emplace_back(name, tensor);
    return params;
  }

  void set_requires_grad(bool flag) {
    for (auto& [name, tensor] : named_parameters()) {
      (void)name;
      tensor->set_requires_grad(flag);
    }
  }

  void zero_grad() {
    for (auto& [name, tensor] : named_parameters()) {
      (void)name;
      tensor->zero_grad();
    }
  }

  std::size_t parameter_total() const {
    std::size_t total = 0;
    for (const auto& [name, tensor] : named_parameters()) {
      (void)name;
      total += tensor->numel();
    }
    return total;
  }
};

using EncoderModel = EncoderModelT<float>;

/// Closed-form parameter count for a config; matches the allocation of
/// init_random exactly. The MLM projection is tied, so it contributes only
/// its output bias.
inline std::size_t count_parameters(const EncoderConfig& config) {
  config.validate();
  const std::size_t h = config.h;
  const std::size_t i = config.i;
  const std::size_t v = config.vocab_size;
  const std::size_t p = config.max_positions;
  const std::size_t embeddings = v * h + p * h + 2 * h;
  const std::size_t attention = 4 * (h * h + h);
  const std::size_t feed_forward = h * i + i + i * h + h;
  const std::size_t per_layer = attention + 2 * h + feed_forward + 2 * h;
  const std::size_t head = h * h + h + 2 * h + v;
  return embeddings + config.d * per_layer + head;
}

/// Zero-filled model of the right shapes; building block for loaders.
template <typename S = float>
EncoderModelT<S> zeros_model(const EncoderConfig& config) {
  config.validate();
  const std::size_t h = config.h;
  const std::size_t i = config.i;
  auto zf = [](std::vector<std::size_t> shape) {
    return TensorT<S>::zeros(std::move(shape), true);
  };
  EncoderModelT<S> model;
  model.config = config;
  model.tok_emb = zf({config.vocab_size, h});
  model.pos_emb = zf({config.max_positions, h});
  model.emb_ln_gain = zf({h});
  model.emb_ln_bias = zf({h});
  model.layers.resize(config.d);
  for (auto& layer : model.layers) {
    layer.wq = zf({h, h});
    layer.bq = zf({h});
    layer.wk = zf({h, h});
    layer.bk = zf({h});
    layer.wv = zf({h, h});
    layer.bv = zf({h});
    layer.wo = zf({h, h});
    layer.bo = zf({h});
    layer.ln_attn_gain = zf({h});
    layer.ln_attn_bias = zf({h});
    layer.w_ff_in = zf({h, i});
    layer.b_ff_in = zf({i});
    layer.w_ff_out = zf({i, h});
    layer.b_ff_out = zf({h});
    layer.ln_ff_gain = zf({h});
    layer.ln_ff_bias = zf({h});
  }
  model.mlm_w = zf({h, h});
  model.mlm_b = zf({h});
  model.mlm_ln_gain = zf({h});
  model.mlm_ln_bias = zf({h});
  model.mlm_out_bias = zf({config.vocab_size});
  return model;
}

/// Weights from normal(0, 0.02), biases zero, layer-norm gain one.
template <typename S = float>
EncoderModelT<S> init_random(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  constexpr double kStd = 0.02;
  const std::size_t h = config.h;
  const std::size_t i = config.i;

  auto ones = [](std::size_t n) { return TensorT<S>::full({n}, S(1), true); };
  auto zeros_vec = [](std::size_t n) { return TensorT<S>::zeros({n}, true); };

  EncoderModelT<S> model;
  model.config = config;
  model.tok_emb = TensorT<S>::randn({config.vocab_size, h}, rng, kStd, true);
  model.pos_emb = TensorT<S>::randn({config.max_positions, h}, rng, kStd, true);
  model.emb_ln_gain = ones(h);
  model.emb_ln_bias = zeros_vec(h);
  model.layers.resize(config.d);
  for (auto& layer : model.layers) {
    layer.wq = TensorT<S>::randn({h, h}, rng, kStd, true);
    layer.bq = zeros_vec(h);
    layer.wk = TensorT<S>::randn({h, h}, rng, kStd, true);
    layer.bk = zeros_vec(h);
    layer.wv = TensorT<S>::randn({h, h}, rng, kStd, true);
    layer.bv = zeros_vec(h);
    layer.wo = TensorT<S>::randn({h, h}, rng, kStd, true);
    layer.bo = zeros_vec(h);
    layer.ln_attn_gain = ones(h);
    layer.ln_attn_bias = zeros_vec(h);
    layer.w_ff_in = TensorT<S>::randn({h, i}, rng, kStd, true);
    layer.b_ff_in = zeros_vec(i);
    layer.w_ff_out = TensorT<S>::randn({i, h}, rng, kStd, true);
    layer.b_ff_out = zeros_vec(h);
    layer.ln_ff_gain = ones(h);
    layer.ln_ff_bias = zeros_vec(h);
  }
  model.mlm_w = TensorT<S>::randn({h, h}, rng, kStd, true);
  model.mlm_b = zeros_vec(h);
  model.mlm_ln_gain = ones(h);
  model.mlm_ln_bias = zeros_vec(h);
  model.mlm_out_bias = TensorT<S>::zeros({config.vocab_size}, true);
  return model;
}

/// Deep copy with fresh storage.
template <typename S>
EncoderModelT<S> clone_model(const EncoderModelT<S>& model) {
  EncoderModelT<S> copy = zeros_model<S>(model.config);
  auto src = const_cast<EncoderModelT<S>&>(model).named_parameters();
  auto dst = copy.named_parameters();
  for (std::size_t p = 0; p < src.size(); ++p) {
    dst[p].second->values() = src[p].second->values();
    dst[p].second->set_requires_grad(src[p].second->requires_grad());
  }
  return copy;
}

/// Builds a student from a teacher: embeddings and head copied, student
/// layer k seeded from teacher layer floor(k * teacher_D / student_D).
/// Tensors whose shapes differ keep their random init and are reported in
/// `notices`.
template <typename S>
EncoderModelT<S> init_student_from_teacher(const EncoderModelT<S>& teacher,
                                           const EncoderConfig& student_config,
                                           std::uint64_t seed,
                                           std::vector<std::string>* notices = nullptr) {
  student_config.validate();
  if (student_config.h != teacher.config.h) {
    fail(ErrorKind::config, "student hidden size " + std::to_string(student_config.h) +
                                " must equal teacher hidden size " +
                                std::to_string(teacher.config.h));
  }
  if (student_config.d > teacher.config.d) {
    fail(ErrorKind::config, "student depth " + std::to_string(student_config.d) +
                                " exceeds teacher depth " + std::to_string(teacher.config.d));
  }
  if (student_config.vocab_size != teacher.config.vocab_size) {
    fail(ErrorKind::config, "student and teacher vocabulary sizes differ");
  }

  EncoderModelT<S> student = init_random<S>(student_config, seed);
  auto& teacher_mut = const_cast<EncoderModelT<S>&>(teacher);

  auto copy_if_same_shape = [&](const std::string& name, TensorT<S>* dst, TensorT<S>* src) {
    if (dst->shape() == src->shape()) {
      dst->values() = src->values();
    } else if (notices != nullptr) {
      notices->push_back(name + ": teacher shape " + shape_to_string(src->shape()) +
                         " does not fit " + shape_to_string(dst->shape()) +
                         ", kept random init");
    }
  };

  std::vector<std::pair<std::string, TensorT<S>*>> teacher_globals;
  std::vector<std::pair<std::string, TensorT<S>*>> student_globals;
  for (auto& [name, tensor] : teacher_mut.named_parameters()) {
    if (name.rfind("layer", 0) != 0) teacher_globals.emplace_back(name, tensor);
  }
  for (auto& [name, tensor] : student.named_parameters()) {
    if (name.rfind("layer", 0) != 0) student_globals.emplace_back(name, tensor);
  }
  for (std::size_t g = 0; g < student_globals.size(); ++g) {
    copy_if_same_shape(student_globals[g].first, student_globals[g].second,
                       teacher_globals[g].second);
  }

  for (std::size_t k = 0; k < student_config.d; ++k) {
    const std::size_t src = k * teacher.config.d / student_config.d;
    auto& sl = student.layers[k];
    auto& tl = teacher_mut.layers[src];
    const std::string base = "layer" + std::to_string(k) + ".";
    copy_if_same_shape(base + "wq", &sl.wq, &tl.wq);
    copy_if_same_shape(base + "bq", &sl.bq, &tl.bq);
    copy_if_same_shape(base + "wk", &sl.wk, &tl.wk);
    copy_if_same_shape(base + "bk", &sl.bk, &tl.bk);
    copy_if_same_shape(base + "wv", &sl.wv, &tl.wv);
    copy_if_same_shape(base + "bv", &sl.bv, &tl.bv);
    copy_if_same_shape(base + "wo", &sl.wo, &tl.wo);
    copy_if_same_shape(base + "bo", &sl.bo, &tl.bo);
    copy_if_same_shape(base + "ln_attn_gain", &sl.ln_attn_gain, &tl.ln_attn_gain);
    copy_if_same_shape(base + "ln_attn_bias", &sl.ln_attn_bias, &tl.ln_attn_bias);
    copy_if_same_shape(base + "w_ff_in", &sl.w_ff_in, &tl.w_ff_in);
    copy_if_same_shape(base + "b_ff_in", &sl.b_ff_in, &tl.b_ff_in);
    copy_if_same_shape(base + "w_ff_out", &sl.w_ff_out, &tl.w_ff_out);
    copy_if_same_shape(base + "b_ff_out", &sl.b_ff_out, &tl.b_ff_out);
    copy_if_same_shape(base + "ln_ff_gain", &sl.ln_ff_gain, &tl.ln_ff_gain);
    copy_if_same_shape(base + "ln_ff_bias", &sl.ln_ff_bias, &tl.ln_ff_bias);
  }
  return student;
}

template <typename S>
struct ForwardOptionsT {
  bool train = false;
  Rng* rng = nullptr;
  TapeT<S>* tape = nullptr;
};

using ForwardOptions = ForwardOptionsT<float>;

template <typename S>
struct ForwardResultT {
  /// Embedding output followed by each layer's output, so D+1 entries.
  std::vector<TensorT<S>> hidden;
  /// Per-layer attention probabilities, batch x heads x len x len.
  std::vector<TensorT<S>> attention;

  const TensorT<S>& final_hidden() const { return hidden.back(); }
};

using ForwardResult = ForwardResultT<float>;

/// Runs the encoder stack. `attention_mask` holds one byte per position
/// (1 = attend, 0 = padding); padding keys are excluded from every
/// position's attention.
template <typename S>
ForwardResultT<S> forward(const EncoderModelT<S>& model, const IdBatch& ids,
                          const std::vector<std::uint8_t>& attention_mask,
                          const ForwardOptionsT<S>& options = {}) {
  const auto& config = model.config;
  if (attention_mask.size() != ids.ids.size()) {
    fail(ErrorKind::shape_mismatch,
         "attention mask has " + std::to_string(attention_mask.size()) + " entries for " +
             std::to_string(ids.ids.size()) + " ids");
  }
  if (options.train && config.dropout > 0.0 && options.rng == nullptr) {
    fail(ErrorKind::invalid_argument, "training forward with dropout needs an RNG");
  }
  auto& m = const_cast<EncoderModelT<S>&>(model);
  TapeT<S>* tape = options.tape;
  const double rate = options.train ? config.dropout : 0.0;
  auto maybe_dropout = [&](TensorT<S> x) {
    if (rate == 0.0) return x;
    return dropout(tape, x, rate, *options.rng);
  };

  ForwardResultT<S> result;
  TensorT<S> x = embedding_lookup(tape, m.tok_emb, ids);
  x = add(tape, x, position_embedding(tape, m.pos_emb, ids.batch, ids.len));
  x = layer_norm(tape, x, m.emb_ln_gain, m.emb_ln_bias);
  x = maybe_dropout(x);
  result.hidden.push_back(x);

  const std::size_t b = ids.batch;
  const std::size_t len = ids.len;
  const std::size_t heads = config.a;
  const std::size_t hd = config.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  for (auto& layer : m.layers) {
    auto project = [&](const TensorT<S>& w, const TensorT<S>& bias) {
      TensorT<S> proj = add(tape, matmul(tape, x, w), bias);
      proj = reshape(tape, proj, {b, len, heads, hd});
      return swap_axes_1_2(tape, proj);
    };
    TensorT<S> q = project(layer.wq, layer.bq);
    TensorT<S> k = project(layer.wk, layer.bk);
    TensorT<S> v = project(layer.wv, layer.bv);

    TensorT<S> scores = scale(tape, matmul_nt(tape, q, k), static_cast<S>(inv_sqrt_hd));
    scores = mask_attention_scores(tape, scores, attention_mask);
    TensorT<S> probs = softmax_with_temperature(tape, scores, 1.0);
    result.attention.push_back(probs);
    TensorT<S> ctx = matmul(tape, maybe_dropout(probs), v);
    ctx = reshape(tape, swap_axes_1_2(tape, ctx), {b, len, config.h});
    TensorT<S> attn_out = maybe_dropout(add(tape, matmul(tape, ctx, layer.wo), layer.bo));
    x = layer_norm(tape, add(tape, x, attn_out), layer.ln_attn_gain, layer.ln_attn_bias);

    TensorT<S> ff = gelu(tape, add(tape, matmul(tape, x, layer.w_ff_in), layer.b_ff_in));
    ff = maybe_dropout(add(tape, matmul(tape, ff, layer.w_ff_out), layer.b_ff_out));
    x = layer_norm(tape, add(tape, x, ff), layer.ln_ff_gain, layer.ln_ff_bias);
    result.hidden.push_back(x);
  }
  return result;
}

/// MLM head: dense transform, gelu, layer norm, then projection onto the
/// token embedding plus a per-token bias. Output is batch x len x V.
template <typename S>
TensorT<S> mlm_logits(const EncoderModelT<S>& model, const TensorT<S>& final_hidden,
                      TapeT<S>* tape = nullptr) {
  auto& m = const_cast<EncoderModelT<S>&>(model);
  TensorT<S> t = gelu(tape, add(tape, matmul(tape, final_hidden, m.mlm_w), m.mlm_b));
  t = layer_norm(tape, t, m.mlm_ln_gain, m.mlm_ln_bias);
  TensorT<S> logits = matmul_nt(tape, t, m.tok_emb);
  return add(tape, logits, m.mlm_out_bias);
}

/// All-ones attention mask.
inline std::vector<std::uint8_t> full_attention_mask(const IdBatch& ids) {
  return std::vector<std::uint8_t>(ids.ids.size(), 1);
}

}  // namespace distillforge
