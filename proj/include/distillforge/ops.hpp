#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "distillforge/common.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

// Differentiable primitives. Every op takes the active tape as its first
// argument; pass nullptr for pure inference. Ops record adjoint closures only
// when an input can reach a requires_grad leaf.

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
template <typename S>
inline void gemm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S s = arow[p];
      if (s == S(0)) continue;
      const S* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename S>
inline void gemm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc = S(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <typename S>
inline void gemm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S s = arow[p];
      if (s == S(0)) continue;
      S* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += s * brow[j];
    }
  }
}

template <typename S>
[[noreturn]] inline void shape_error(const char* op, const TensorT<S>& a,
                                     const TensorT<S>& b) {
  fail(ErrorKind::shape_mismatch, std::string(op) + ": incompatible shapes " +
                                      shape_to_string(a.shape()) + " and " +
                                      shape_to_string(b.shape()));
}

inline std::vector<std::size_t> leading_dims(const std::vector<std::size_t>& shape,
                                             std::size_t keep_last) {
  return {shape.begin(), shape.end() - static_cast<std::ptrdiff_t>(keep_last)};
}

}  // namespace detail

/// matmul(a, b): a is [..., M, K]; b is either [K, N] (shared weight applied
/// to every leading slice) or [..., K, N] with identical leading dims.
template <typename S>
TensorT<S> matmul(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() < 2 || b.rank() < 2) detail::shape_error("matmul", a, b);
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  const bool shared_b = b.rank() == 2 && a.rank() != 2;
  if (b.dim(b.rank() - 2) != k) detail::shape_error("matmul", a, b);
  const std::size_t n = b.dim(b.rank() - 1);
  if (!shared_b && b.rank() != 2) {
    if (detail::leading_dims(a.shape(), 2) != detail::leading_dims(b.shape(), 2)) {
      detail::shape_error("matmul", a, b);
    }
  }
  const std::size_t batches = a.numel() / (m * k);

  auto out_shape = detail::leading_dims(a.shape(), 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  TensorT<S> out = TensorT<S>::zeros(std::move(out_shape));
  const S* av = a.values().data();
  const S* bv = b.values().data();
  S* ov = out.values().data();
  const std::size_t b_stride = (b.rank() == 2 && a.rank() > 2) ? 0 : k * n;
  for (std::size_t i = 0; i < batches; ++i) {
    detail::gemm_nn(av + i * m * k, bv + i * b_stride, ov + i * m * n, m, k, n);
  }

  const bool rec = detail::tracked<S>(tape, {&a, &b});
  detail::mark_output(out, rec);
  if (rec) {
    auto as = a.state();
    auto bs = b.state();
    auto os = out.state();
    tape->record(os, [as, bs, os, m, k, n, batches, b_stride]() {
      if (os->grad.empty()) return;
      const S* g = os->grad.data();
      if (detail::wants_grad<S>(as)) {
        S* da = detail::ensure_grad<S>(as).data();
        for (std::size_t i = 0; i < batches; ++i) {
          detail::gemm_nt(g + i * m * n, bs->values.data() + i * b_stride,
                          da + i * m * k, m, n, k);
        }
      }
      if (detail::wants_grad<S>(bs)) {
        S* db = detail::ensure_grad<S>(bs).data();
        for (std::size_t i = 0; i < batches; ++i) {
          detail::gemm_tn(as->values.data() + i * m * k, g + i * m * n,
                          db + i * b_stride, m, k, n);
        }
      }
    });
  }
  return out;
}

/// matmul_nt(a, b): a [..., M, K] times b transposed; b is [N, K] (shared) or
/// [..., N, K] batched. Result [..., M, N].
template <typename S>
TensorT<S> matmul_nt(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() < 2 || b.rank() < 2) detail::shape_error("matmul_nt", a, b);
  const std::size_t m = a.dim(a.rank() - 2);
  const std::size_t k = a.dim(a.rank() - 1);
  if (b.dim(b.rank() - 1) != k) detail::shape_error("matmul_nt", a, b);
  const std::size_t n = b.dim(b.rank() - 2);
  if (b.rank() != 2) {
    if (detail::leading_dims(a.shape(), 2) != detail::leading_dims(b.shape(), 2)) {
      detail::shape_error("matmul_nt", a, b);
    }
  }
  const std::size_t batches = a.numel() / (m * k);

  auto out_shape = detail::leading_dims(a.shape(), 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  TensorT<S> out = TensorT<S>::zeros(std::move(out_shape));
  const S* av = a.values().data();
  const S* bv = b.values().data();
  S* ov = out.values().data();
  const std::size_t b_stride = (b.rank() == 2 && a.rank() > 2) ? 0 : n * k;
  for (std::size_t i = 0; i < batches; ++i) {
    detail::gemm_nt(av + i * m * k, bv + i * b_stride, ov + i * m * n, m, k, n);
  }

  const bool rec = detail::tracked<S>(tape, {&a, &b});
  detail::mark_output(out, rec);
  if (rec) {
    auto as = a.state();
    auto bs = b.state();
    auto os = out.state();
    tape->record(os, [as, bs, os, m, k, n, batches, b_stride]() {
      if (os->grad.empty()) return;
      const S* g = os->grad.data();
      if (detail::wants_grad<S>(as)) {
        // da[M,K] += g[M,N] * b[N,K]
        S* da = detail::ensure_grad<S>(as).data();
        for (std::size_t i = 0; i < batches; ++i) {
          detail::gemm_nn(g + i * m * n, bs->values.data() + i * b_stride,
                          da + i * m * k, m, n, k);
        }
      }
      if (detail::wants_grad<S>(bs)) {
        // db[N,K] += g[M,N]^T * a[M,K]
        S* db = detail::ensure_grad<S>(bs).data();
        for (std::size_t i = 0; i < batches; ++i) {
          detail::gemm_tn(g + i * m * n, as->values.data() + i * m * k,
                          db + i * b_stride, m, n, k);
        }
      }
    });
  }
  return out;
}

/// add(a, b): same-shape elementwise, or b rank-1 broadcast over the trailing
/// axis (bias add).
template <typename S>
TensorT<S> add(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
  const bool bias = b.rank() == 1 && a.rank() > 1;
  if (bias) {
    if (a.dim(a.rank() - 1) != b.dim(0)) detail::shape_error("add", a, b);
  } else if (a.shape() != b.shape()) {
    detail::shape_error("add", a, b);
  }
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  const std::size_t width = bias ? b.dim(0) : n;
  const S* av = a.values().data();
  const S* bv = b.values().data();
  S* ov = out.values().data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[bias ? i % width : i];

  const bool rec = detail::tracked<S>(tape, {&a, &b});
  detail::mark_output(out, rec);
  if (rec) {
    auto as = a.state();
    auto bs = b.state();
    auto os = out.state();
    tape->record(os, [as, bs, os, n, width, bias]() {
      if (os->grad.empty()) return;
      const S* g = os->grad.data();
      if (detail::wants_grad<S>(as)) {
        S* da = detail::ensure_grad<S>(as).data();
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (detail::wants_grad<S>(bs)) {
        S* db = detail::ensure_grad<S>(bs).data();
        if (bias) {
          for (std::size_t i = 0; i < n; ++i) db[i % width] += g[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> mul(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) detail::shape_error("mul", a, b);
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];

  const bool rec = detail::tracked<S>(tape, {&a, &b});
  detail::mark_output(out, rec);
  if (rec) {
    auto as = a.state();
    auto bs = b.state();
    auto os = out.state();
    tape->record(os, [as, bs, os, n]() {
      if (os->grad.empty()) return;
      const S* g = os->grad.data();
      if (detail::wants_grad<S>(as)) {
        S* da = detail::ensure_grad<S>(as).data();
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bs->values[i];
      }
      if (detail::wants_grad<S>(bs)) {
        S* db = detail::ensure_grad<S>(bs).data();
        for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * as->values[i];
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> scale(TapeT<S>* tape, const TensorT<S>& a, S factor) {
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * factor;

  const bool rec = detail::tracked<S>(tape, {&a});
  detail::mark_output(out, rec);
  if (rec) {
    auto as = a.state();
    auto os = out.state();
    tape->record(os, [as, os, n, factor]() {
      if (os->grad.empty()) return;
      const S* g = os->grad.data();
      if (detail::wants_grad<S>(as)) {
        S* da = detail::ensure_grad<S>(as).data();
        for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * factor;
      }
    });
  }
  return out;
}

/// Exact (erf-based) GELU.
template <typename S>
TensorT<S> gelu(TapeT<S>* tape, const TensorT<S>& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(a.values()[i]);
    out.values()[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }

  const bool rec = detail::tracked<S>(tape, {&a});
  detail::mark_output(out, rec);
  if (rec) {
    auto as = a.state();
    auto os = out.state();
    tape->record(os, [as, os, n]() {
      if (os->grad.empty() || !detail::wants_grad<S>(as)) return;
      const S* g = os->grad.data();
      S* da = detail::ensure_grad<S>(as).data();
      for (std::size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(as->values[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        da[i] += g[i] * static_cast<S>(cdf + x * pdf);
      }
    });
  }
  return out;
}

/// Layer normalization over the trailing axis with per-feature affine
/// parameters; epsilon sits inside the square root.
template <typename S>
TensorT<S> layer_norm(TapeT<S>* tape, const TensorT<S>& x, const TensorT<S>& gain,
                      const TensorT<S>& bias, double eps = 1e-5) {
  const std::size_t h = x.dim(x.rank() - 1);
  if (gain.rank() != 1 || gain.dim(0) != h) detail::shape_error("layer_norm", x, gain);
  if (bias.rank() != 1 || bias.dim(0) != h) detail::shape_error("layer_norm", x, bias);
  const std::size_t rows = x.numel() / h;

  TensorT<S> out = TensorT<S>::zeros(x.shape());
  std::vector<S> normed(x.numel());
  std::vector<S> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* xv = x.values().data() + r * h;
    double mean = 0.0;
    for (std::size_t j = 0; j < h; ++j) mean += xv[j];
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double d = xv[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(h);
    const double istd = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<S>(istd);
    S* nv = normed.data() + r * h;
    S* ov = out.values().data() + r * h;
    for (std::size_t j = 0; j < h; ++j) {
      nv[j] = static_cast<S>((xv[j] - mean) * istd);
      ov[j] = nv[j] * gain.values()[j] + bias.values()[j];
    }
  }

  const bool rec = detail::tracked<S>(tape, {&x, &gain, &bias});
  detail::mark_output(out, rec);
  if (rec) {
    auto xs = x.state();
    auto gs = gain.state();
    auto bs = bias.state();
    auto os = out.state();
    auto normed_p = std::make_shared<std::vector<S>>(std::move(normed));
    auto istd_p = std::make_shared<std::vector<S>>(std::move(inv_std));
    tape->record(os, [xs, gs, bs, os, normed_p, istd_p, rows, h]() {
      if (os->grad.empty()) return;
      const S* g = os->grad.data();
      const std::vector<S>& nv = *normed_p;
      if (detail::wants_grad<S>(gs)) {
        S* dg = detail::ensure_grad<S>(gs).data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < h; ++j) dg[j] += g[r * h + j] * nv[r * h + j];
        }
      }
      if (detail::wants_grad<S>(bs)) {
        S* db = detail::ensure_grad<S>(bs).data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < h; ++j) db[j] += g[r * h + j];
        }
      }
      if (detail::wants_grad<S>(xs)) {
        S* dx = detail::ensure_grad<S>(xs).data();
        for (std::size_t r = 0; r < rows; ++r) {
          const S* grow = g + r * h;
          const S* nrow = nv.data() + r * h;
          double sum_dn = 0.0;
          double sum_dn_n = 0.0;
          for (std::size_t j = 0; j < h; ++j) {
            const double dn = static_cast<double>(grow[j]) * gs->values[j];
            sum_dn += dn;
            sum_dn_n += dn * nrow[j];
          }
          const double mean_dn = sum_dn / static_cast<double>(h);
          const double mean_dn_n = sum_dn_n / static_cast<double>(h);
          const double istd = (*istd_p)[r];
          for (std::size_t j = 0; j < h; ++j) {
            const double dn = static_cast<double>(grow[j]) * gs->values[j];
            dx[r * h + j] += static_cast<S>(istd * (dn - mean_dn - nrow[j] * mean_dn_n));
          }
        }
      }
    });
  }
  return out;
}

/// Rows of `table` gathered by token id; out is [batch, len, width].
template <typename S>
TensorT<S> embedding_lookup(TapeT<S>* tape, const TensorT<S>& table, const IdBatch& ids) {
  if (table.rank() != 2) {
    fail(ErrorKind::shape_mismatch,
         "embedding_lookup: table must be rank 2, got " + shape_to_string(table.shape()));
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t width = table.dim(1);
  TensorT<S> out = TensorT<S>::zeros({ids.batch, ids.len, width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int32_t id = ids.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      fail(ErrorKind::data, "embedding_lookup: token id " + std::to_string(id) +
                                " outside table of size " + std::to_string(vocab));
    }
    std::copy_n(table.values().data() + static_cast<std::size_t>(id) * width, width,
                out.values().data() + i * width);
  }

  const bool rec = detail::tracked<S>(tape, {&table});
  detail::mark_output(out, rec);
  if (rec) {
    auto ts = table.state();
    auto os = out.state();
    auto ids_copy = std::make_shared<std::vector<std::int32_t>>(ids.ids);
    tape->record(os, [ts, os, ids_copy, width]() {
      if (os->grad.empty() || !detail::wants_grad<S>(ts)) return;
      const S* g = os->grad.data();
      S* dt = detail::ensure_grad<S>(ts).data();
      for (std::size_t i = 0; i < ids_copy->size(); ++i) {
        S* row = dt + static_cast<std::size_t>((*ids_copy)[i]) * width;
        const S* grow = g + i * width;
        for (std::size_t j = 0; j < width; ++j) row[j] += grow[j];
      }
    });
  }
  return out;
}

/// Positions 0..len-1 of `table` broadcast over the batch; out [batch, len, width].
template <typename S>
TensorT<S> position_embedding(TapeT<S>* tape, const TensorT<S>& table, std::size_t batch,
                              std::size_t len) {
  const std::size_t max_positions = table.dim(0);
  const std::size_t width = table.dim(1);
  if (len > max_positions) {
    fail(ErrorKind::invalid_argument,
         "position_embedding: sequence length " + std::to_string(len) +
             " exceeds max positions " + std::to_string(max_positions));
  }
  TensorT<S> out = TensorT<S>::zeros({batch, len, width});
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(table.values().data(), len * width,
                out.values().data() + b * len * width);
  }

  const bool rec = detail::tracked<S>(tape, {&table});
  detail::mark_output(out, rec);
  if (rec) {
    auto ts = table.state();
    auto os = out.state();
    tape->record(os, [ts, os, batch, len, width]() {
      if (os->grad.empty() || !detail::wants_grad<S>(ts)) return;
      const S* g = os->grad.data();
      S* dt = detail::ensure_grad<S>(ts).data();
      for (std::size_t b = 0; b < batch; ++b) {
        const S* gb = g + b * len * width;
        for (std::size_t i = 0; i < len * width; ++i) dt[i] += gb[i];
      }
    });
  }
  return out;
}

/// Temperature softmax over the trailing axis, stabilized by max subtraction.
template <typename S>
TensorT<S> softmax_with_temperature(TapeT<S>* tape, const TensorT<S>& logits, double temperature) {
  if (temperature <= 0.0) {
    fail(ErrorKind::invalid_argument,
         "softmax_with_temperature: temperature must be positive, got " +
             std::to_string(temperature));
  }
  if (logits.rank() == 0 || logits.dim(logits.rank() - 1) == 0) {
    fail(ErrorKind::invalid_argument,
         "softmax_with_temperature: trailing axis must be non-empty");
  }
  const std::size_t k = logits.dim(logits.rank() - 1);
  const std::size_t rows = logits.numel() / k;
  TensorT<S> out = TensorT<S>::zeros(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* z = logits.values().data() + r * k;
    S* p = out.values().data() + r * k;
    double zmax = z[0];
    for (std::size_t j = 1; j < k; ++j) zmax = std::max<double>(zmax, z[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp((z[j] - zmax) / temperature);
      p[j] = static_cast<S>(e);
      denom += e;
    }
    for (std::size_t j = 0; j < k; ++j) p[j] = static_cast<S>(p[j] / denom);
  }

  const bool rec = detail::tracked<S>(tape, {&logits});
  detail::mark_output(out, rec);
  if (rec) {
    auto ls = logits.state();
    auto os = out.state();
    tape->record(os, [ls, os, rows, k, temperature]() {
      if (os->grad.empty() || !detail::wants_grad<S>(ls)) return;
      const S* g = os->grad.data();
      const S* p = os->values.data();
      S* dz = detail::ensure_grad<S>(ls).data();
      for (std::size_t r = 0; r < rows; ++r) {
        const S* grow = g + r * k;
        const S* prow = p + r * k;
        double dot = 0.0;
        for (std::size_t j = 0; j < k; ++j) dot += static_cast<double>(grow[j]) * prow[j];
        for (std::size_t j = 0; j < k; ++j) {
          dz[r * k + j] +=
              static_cast<S>(prow[j] * (grow[j] - dot) / temperature);
        }
      }
    });
  }
  return out;
}

/// [A,B,C,D] -> [A,C,B,D]; used to move the head axis next to the batch axis.
template <typename S>
TensorT<S> swap_axes_1_2(TapeT<S>* tape, const TensorT<S>& x) {
  if (x.rank() != 4) {
    fail(ErrorKind::shape_mismatch,
         "swap_axes_1_2: expected rank 4, got " + shape_to_string(x.shape()));
  }
  const std::size_t a = x.dim(0), b = x.dim(1), c = x.dim(2), d = x.dim(3);
  TensorT<S> out = TensorT<S>::zeros({a, c, b, d});
  const S* xv = x.values().data();
  S* ov = out.values().data();
  for (std::size_t i = 0; i < a; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      for (std::size_t l = 0; l < c; ++l) {
        std::copy_n(xv + ((i * b + j) * c + l) * d, d, ov + ((i * c + l) * b + j) * d);
      }
    }
  }

  const bool rec = detail::tracked<S>(tape, {&x});
  detail::mark_output(out, rec);
  if (rec) {
    auto xs = x.state();
    auto os = out.state();
    tape->record(os, [xs, os, a, b, c, d]() {
      if (os->grad.empty() || !detail::wants_grad<S>(xs)) return;
      const S* g = os->grad.data();
      S* dx = detail::ensure_grad<S>(xs).data();
      for (std::size_t i = 0; i < a; ++i) {
        for (std::size_t l = 0; l < c; ++l) {
          for (std::size_t j = 0; j < b; ++j) {
            const S* grow = g + ((i * c + l) * b + j) * d;
            S* drow = dx + ((i * b + j) * c + l) * d;
            for (std::size_t t = 0; t < d; ++t) drow[t] += grow[t];
          }
        }
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> reshape(TapeT<S>* tape, const TensorT<S>& x, std::vector<std::size_t> new_shape) {
  if (TensorT<S>::shape_numel(new_shape) != x.numel()) {
    fail(ErrorKind::shape_mismatch, "reshape: cannot view " + shape_to_string(x.shape()) +
                                        " as " + shape_to_string(new_shape));
  }
  TensorT<S> out = TensorT<S>::from_data(std::move(new_shape), x.values());

  const bool rec = detail::tracked<S>(tape, {&x});
  detail::mark_output(out, rec);
  if (rec) {
    auto xs = x.state();
    auto os = out.state();
    tape->record(os, [xs, os]() {
      if (os->grad.empty() || !detail::wants_grad<S>(xs)) return;
      S* dx = detail::ensure_grad<S>(xs).data();
      for (std::size_t i = 0; i < os->grad.size(); ++i) dx[i] += os->grad[i];
    });
  }
  return out;
}

/// x [B,L,H] -> [B,H] at one sequence position.
template <typename S>
TensorT<S> take_position(TapeT<S>* tape, const TensorT<S>& x, std::size_t pos) {
  if (x.rank() != 3) {
    fail(ErrorKind::shape_mismatch,
         "take_position: expected rank 3, got " + shape_to_string(x.shape()));
  }
  const std::size_t b = x.dim(0), l = x.dim(1), h = x.dim(2);
  if (pos >= l) {
    fail(ErrorKind::invalid_argument, "take_position: position " + std::to_string(pos) +
                                          " out of range for length " + std::to_string(l));
  }
  TensorT<S> out = TensorT<S>::zeros({b, h});
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(x.values().data() + (i * l + pos) * h, h, out.values().data() + i * h);
  }

  const bool rec = detail::tracked<S>(tape, {&x});
  detail::mark_output(out, rec);
  if (rec) {
    auto xs = x.state();
    auto os = out.state();
    tape->record(os, [xs, os, b, l, h, pos]() {
      if (os->grad.empty() || !detail::wants_grad<S>(xs)) return;
      const S* g = os->grad.data();
      S* dx = detail::ensure_grad<S>(xs).data();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < h; ++j) dx[(i * l + pos) * h + j] += g[i * h + j];
      }
    });
  }
  return out;
}

/// Adds a large negative bias to attention scores at padded key positions.
/// scores [B,A,Lq,Lk]; key_mask has B*Lk entries, zero meaning padding.
template <typename S>
TensorT<S> mask_attention_scores(TapeT<S>* tape, const TensorT<S>& scores,
                                 const std::vector<std::uint8_t>& key_mask) {
  if (scores.rank() != 4) {
    fail(ErrorKind::shape_mismatch,
         "mask_attention_scores: expected rank 4, got " + shape_to_string(scores.shape()));
  }
  const std::size_t b = scores.dim(0), a = scores.dim(1), lq = scores.dim(2),
                    lk = scores.dim(3);
  if (key_mask.size() != b * lk) {
    fail(ErrorKind::shape_mismatch, "mask_attention_scores: mask size " +
                                        std::to_string(key_mask.size()) +
                                        " does not cover batch*key_len " +
                                        std::to_string(b * lk));
  }
  constexpr S kNegInf = S(-1e9);
  TensorT<S> out = TensorT<S>::from_data(scores.shape(), scores.values());
  S* ov = out.values().data();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < a * lq; ++j) {
      S* row = ov + (i * a * lq + j) * lk;
      const std::uint8_t* mrow = key_mask.data() + i * lk;
      for (std::size_t t = 0; t < lk; ++t) {
        if (mrow[t] == 0) row[t] += kNegInf;
      }
    }
  }

  const bool rec = detail::tracked<S>(tape, {&scores});
  detail::mark_output(out, rec);
  if (rec) {
    auto ss = scores.state();
    auto os = out.state();
    tape->record(os, [ss, os]() {
      if (os->grad.empty() || !detail::wants_grad<S>(ss)) return;
      S* ds = detail::ensure_grad<S>(ss).data();
      for (std::size_t i = 0; i < os->grad.size(); ++i) ds[i] += os->grad[i];
    });
  }
  return out;
}

/// Inverted dropout; identity when rate is zero.
template <typename S>
TensorT<S> dropout(TapeT<S>* tape, const TensorT<S>& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    fail(ErrorKind::invalid_argument,
         "dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const std::size_t n = x.numel();
  auto mask = std::make_shared<std::vector<S>>(n);
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const S m = bernoulli(rng, rate) ? S(0) : keep_scale;
    (*mask)[i] = m;
    out.values()[i] = x.values()[i] * m;
  }

  const bool rec = detail::tracked<S>(tape, {&x});
  detail::mark_output(out, rec);
  if (rec) {
    auto xs = x.state();
    auto os = out.state();
    tape->record(os, [xs, os, mask, n]() {
      if (os->grad.empty() || !detail::wants_grad<S>(xs)) return;
      S* dx = detail::ensure_grad<S>(xs).data();
      for (std::size_t i = 0; i < n; ++i) dx[i] += os->grad[i] * (*mask)[i];
    });
  }
  return out;
}

template <typename S>
TensorT<S> sum(TapeT<S>* tape, const TensorT<S>& x) {
  double acc = 0.0;
  for (const S v : x.values()) acc += v;
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(acc));

  const bool rec = detail::tracked<S>(tape, {&x});
  detail::mark_output(out, rec);
  if (rec) {
    auto xs = x.state();
    auto os = out.state();
    tape->record(os, [xs, os]() {
      if (os->grad.empty() || !detail::wants_grad<S>(xs)) return;
      const S g = os->grad[0];
      S* dx = detail::ensure_grad<S>(xs).data();
      for (std::size_t i = 0; i < xs->values.size(); ++i) dx[i] += g;
    });
  }
  return out;
}

template <typename S>
TensorT<S> mean_all(TapeT<S>* tape, const TensorT<S>& x) {
  TensorT<S> total = sum(tape, x);
  return scale(tape, total, static_cast<S>(1.0 / static_cast<double>(x.numel())));
}

}  // namespace distillforge
