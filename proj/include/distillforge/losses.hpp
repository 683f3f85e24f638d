#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "distillforge/common.hpp"
#include "distillforge/ops.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

namespace detail {

/// Norms below this are clamped so zero vectors stay differentiable.
inline constexpr double kNormFloor = 1e-6;

template <typename S>
inline void check_class_axis(const TensorT<S>& logits, const char* op) {
  if (logits.rank() < 2 || logits.dim(logits.rank() - 1) == 0) {
    fail(ErrorKind::shape_mismatch, std::string(op) + ": logits must be [..., classes], got " +
                                        shape_to_string(logits.shape()));
  }
}

/// Row softmax at a temperature, computed in double. Returns log Z shifted by
/// the row max so that log p_j = (z_j - zmax)/T - log_denom.
inline double stable_softmax_row(const double* z, std::size_t k, double temperature,
                                 double zmax, std::vector<double>& out) {
  double denom = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    out[j] = std::exp((z[j] - zmax) / temperature);
    denom += out[j];
  }
  for (std::size_t j = 0; j < k; ++j) out[j] /= denom;
  return std::log(denom);
}

}  // namespace detail

/// Mean negative log-likelihood of the labeled classes under softmax(logits).
/// Rows whose label is kIgnoreLabel do not contribute. Shared by the MLM head
/// (classes = vocab) and the fine-tuning heads (classes = task labels).
template <typename S>
TensorT<S> softmax_cross_entropy(TapeT<S>* tape, const TensorT<S>& logits,
                                 const std::vector<std::int32_t>& labels) {
  detail::check_class_axis(logits, "softmax_cross_entropy");
  const std::size_t k = logits.dim(logits.rank() - 1);
  const std::size_t rows = logits.numel() / k;
  if (labels.size() != rows) {
    fail(ErrorKind::shape_mismatch,
         "softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
             std::to_string(rows) + " logit rows");
  }
  std::size_t active = 0;
  double nll = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t label = labels[r];
    if (label == kIgnoreLabel) continue;
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      fail(ErrorKind::data, "softmax_cross_entropy: label " + std::to_string(label) +
                                " outside [0, " + std::to_string(k) + ")");
    }
    const S* z = logits.values().data() + r * k;
    double zmax = z[0];
    for (std::size_t j = 1; j < k; ++j) zmax = std::max<double>(zmax, z[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(z[j]) - zmax);
    nll += zmax + std::log(denom) - static_cast<double>(z[label]);
    ++active;
  }
  if (active == 0) {
    fail(ErrorKind::invalid_argument, "softmax_cross_entropy: no active labels");
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(nll / static_cast<double>(active)));

  const bool rec = detail::tracked<S>(tape, {&logits});
  detail::mark_output(out, rec);
  if (rec) {
    auto ls = logits.state();
    auto os = out.state();
    auto labels_copy = std::make_shared<std::vector<std::int32_t>>(labels);
    tape->record(os, [ls, os, labels_copy, rows, k, active]() {
      if (os->grad.empty() || !detail::wants_grad<S>(ls)) return;
      const double g = os->grad[0] / static_cast<double>(active);
      S* dz = detail::ensure_grad<S>(ls).data();
      std::vector<double> zrow(k), prob(k);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::int32_t label = (*labels_copy)[r];
        if (label == kIgnoreLabel) continue;
        const S* z = ls->values.data() + r * k;
        double zmax = z[0];
        for (std::size_t j = 1; j < k; ++j) zmax = std::max<double>(zmax, z[j]);
        for (std::size_t j = 0; j < k; ++j) zrow[j] = z[j];
        detail::stable_softmax_row(zrow.data(), k, 1.0, zmax, prob);
        for (std::size_t j = 0; j < k; ++j) {
          double d = prob[j];
          if (static_cast<std::size_t>(label) == j) d -= 1.0;
          dz[r * k + j] += static_cast<S>(g * d);
        }
      }
    });
  }
  return out;
}

/// Soft-target cross-entropy between teacher and student logits at a shared
/// temperature, averaged over active rows and scaled by T^2 so the gradient
/// magnitude stays comparable across temperatures. The teacher side is
/// treated as a constant. `active` selects rows (masked positions); empty
/// means every row.
template <typename S>
TensorT<S> distillation_ce_loss(TapeT<S>* tape, const TensorT<S>& teacher_logits,
                                const TensorT<S>& student_logits, double temperature,
                                const std::vector<std::uint8_t>& active = {}) {
  if (temperature <= 0.0) {
    fail(ErrorKind::invalid_argument,
         "distillation_ce_loss: temperature must be positive, got " +
             std::to_string(temperature));
  }
  if (teacher_logits.shape() != student_logits.shape()) {
    detail::shape_error("distillation_ce_loss", teacher_logits, student_logits);
  }
  detail::check_class_axis(student_logits, "distillation_ce_loss");
  const std::size_t k = student_logits.dim(student_logits.rank() - 1);
  const std::size_t rows = student_logits.numel() / k;
  if (!active.empty() && active.size() != rows) {
    fail(ErrorKind::shape_mismatch,
         "distillation_ce_loss: active mask size " + std::to_string(active.size()) +
             " does not match " + std::to_string(rows) + " rows");
  }

  std::vector<double> t_row(k), s_row(k), p(k), q(k);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!active.empty() && active[r] == 0) continue;
    const S* tz = teacher_logits.values().data() + r * k;
    const S* sz = student_logits.values().data() + r * k;
    double tmax = tz[0], smax = sz[0];
    for (std::size_t j = 0; j < k; ++j) {
      t_row[j] = tz[j];
      s_row[j] = sz[j];
      tmax = std::max(tmax, t_row[j]);
      smax = std::max(smax, s_row[j]);
    }
    detail::stable_softmax_row(t_row.data(), k, temperature, tmax, p);
    const double s_logz = detail::stable_softmax_row(s_row.data(), k, temperature, smax, q);
    for (std::size_t j = 0; j < k; ++j) {
      // log q_j = (s_j - smax)/T - s_logz
      total -= p[j] * ((s_row[j] - smax) / temperature - s_logz);
    }
    ++count;
  }
  if (count == 0) {
    fail(ErrorKind::invalid_argument, "distillation_ce_loss: no active rows");
  }
  const double t2 = temperature * temperature;
  TensorT<S> out =
      TensorT<S>::scalar(static_cast<S>(t2 * total / static_cast<double>(count)));

  const bool rec = detail::tracked<S>(tape, {&student_logits});
  detail::mark_output(out, rec);
  if (rec) {
    auto ss = student_logits.state();
    auto ts = teacher_logits.state();
    auto os = out.state();
    auto active_copy = std::make_shared<std::vector<std::uint8_t>>(active);
    tape->record(os, [ss, ts, os, active_copy, rows, k, temperature, count]() {
      if (os->grad.empty() || !detail::wants_grad<S>(ss)) return;
      // d/ds_j of T^2 * (-sum_i p_i log q_i) = T * (q_j - p_j)
      const double g = os->grad[0] * temperature / static_cast<double>(count);
      S* ds = detail::ensure_grad<S>(ss).data();
      std::vector<double> t_row(k), s_row(k), p(k), q(k);
      for (std::size_t r = 0; r < rows; ++r) {
        if (!active_copy->empty() && (*active_copy)[r] == 0) continue;
        const S* tz = ts->values.data() + r * k;
        const S* sz = ss->values.data() + r * k;
        double tmax = tz[0], smax = sz[0];
        for (std::size_t j = 0; j < k; ++j) {
          t_row[j] = tz[j];
          s_row[j] = sz[j];
          tmax = std::max(tmax, t_row[j]);
          smax = std::max(smax, s_row[j]);
        }
        detail::stable_softmax_row(t_row.data(), k, temperature, tmax, p);
        detail::stable_softmax_row(s_row.data(), k, temperature, smax, q);
        for (std::size_t j = 0; j < k; ++j) {
          ds[r * k + j] += static_cast<S>(g * (q[j] - p[j]));
        }
      }
    });
  }
  return out;
}

/// Mean over selected rows of (1 - cosine similarity) between reference and
/// student vectors along the trailing axis. The reference side is constant.
/// `active` selects rows (non-padding positions); empty means every row.
template <typename S>
TensorT<S> cosine_alignment_loss(TapeT<S>* tape, const TensorT<S>& reference,
                                 const TensorT<S>& student,
                                 const std::vector<std::uint8_t>& active = {}) {
  if (reference.shape() != student.shape()) {
    detail::shape_error("cosine_alignment_loss", reference, student);
  }
  detail::check_class_axis(student, "cosine_alignment_loss");
  const std::size_t h = student.dim(student.rank() - 1);
  const std::size_t rows = student.numel() / h;
  if (!active.empty() && active.size() != rows) {
    fail(ErrorKind::shape_mismatch,
         "cosine_alignment_loss: active mask size " + std::to_string(active.size()) +
             " does not match " + std::to_string(rows) + " rows");
  }

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!active.empty() && active[r] == 0) continue;
    const S* u = reference.values().data() + r * h;
    const S* v = student.values().data() + r * h;
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      uu += static_cast<double>(u[j]) * u[j];
      vv += static_cast<double>(v[j]) * v[j];
      uv += static_cast<double>(u[j]) * v[j];
    }
    const double nu = std::max(std::sqrt(uu), detail::kNormFloor);
    const double nv = std::max(std::sqrt(vv), detail::kNormFloor);
    total += 1.0 - uv / (nu * nv);
    ++count;
  }
  if (count == 0) {
    fail(ErrorKind::invalid_argument, "cosine_alignment_loss: no active rows");
  }
  TensorT<S> out = TensorT<S>::scalar(static_cast<S>(total / static_cast<double>(count)));

  const bool rec = detail::tracked<S>(tape, {&student});
  detail::mark_output(out, rec);
  if (rec) {
    auto us = reference.state();
    auto vs = student.state();
    auto os = out.state();
    auto active_copy = std::make_shared<std::vector<std::uint8_t>>(active);
    tape->record(os, [us, vs, os, active_copy, rows, h, count]() {
      if (os->grad.empty() || !detail::wants_grad<S>(vs)) return;
      const double g = os->grad[0] / static_cast<double>(count);
      S* dv = detail::ensure_grad<S>(vs).data();
      for (std::size_t r = 0; r < rows; ++r) {
        if (!active_copy->empty() && (*active_copy)[r] == 0) continue;
        const S* u = us->values.data() + r * h;
        const S* v = vs->values.data() + r * h;
        double uu = 0.0, vv = 0.0, uv = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
          uu += static_cast<double>(u[j]) * u[j];
          vv += static_cast<double>(v[j]) * v[j];
          uv += static_cast<double>(u[j]) * v[j];
        }
        const double nu = std::max(std::sqrt(uu), detail::kNormFloor);
        const double nv = std::max(std::sqrt(vv), detail::kNormFloor);
        const double cos = uv / (nu * nv);
        // d(1 - cos)/dv_j = -u_j/(|u||v|) + cos * v_j/|v|^2
        for (std::size_t j = 0; j < h; ++j) {
          const double d = -u[j] / (nu * nv) + cos * v[j] / (nv * nv);
          dv[r * h + j] += static_cast<S>(g * d);
        }
      }
    });
  }
  return out;
}

/// Log-probability of one class from a logits tensor, computed in double with
/// a stable log-sum-exp. Inference helper, no gradient.
template <typename S>
double log_softmax_at(const TensorT<S>& logits, std::size_t row, std::size_t cls) {
  const std::size_t k = logits.dim(logits.rank() - 1);
  const S* z = logits.values().data() + row * k;
  double zmax = z[0];
  for (std::size_t j = 1; j < k; ++j) zmax = std::max<double>(zmax, z[j]);
  double denom = 0.0;
  for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(z[j]) - zmax);
  return static_cast<double>(z[cls]) - zmax - std::log(denom);
}

}  // namespace distillforge
