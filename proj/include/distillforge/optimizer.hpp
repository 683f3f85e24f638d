#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "distillforge/common.hpp"
#include "distillforge/tensor.hpp"

namespace distillforge {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (lr <= 0.0) fail(ErrorKind::invalid_argument, "learning rate must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      fail(ErrorKind::invalid_argument, "adam betas must lie in [0, 1)");
    }
    if (eps <= 0.0) fail(ErrorKind::invalid_argument, "adam epsilon must be positive");
    if (weight_decay < 0.0) {
      fail(ErrorKind::invalid_argument, "weight decay must be non-negative");
    }
  }
};

/// Adam with decoupled weight decay. Parameters without an accumulated
/// gradient are skipped by a step, weight decay included, so frozen or
/// untouched tensors stay put.
template <typename S>
class AdamWT {
 public:
  AdamWT(std::vector<TensorT<S>*> params, AdamWConfig config)
      : params_(std::move(params)), config_(config) {
    config_.validate();
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t p = 0; p < params_.size(); ++p) {
      m_[p].assign(params_[p]->numel(), 0.0);
      v_[p].assign(params_[p]->numel(), 0.0);
    }
  }

  void set_lr(double lr) {
    if (lr <= 0.0) fail(ErrorKind::invalid_argument, "learning rate must be positive");
    config_.lr = lr;
  }
  double lr() const { return config_.lr; }
  std::size_t steps_taken() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      TensorT<S>& param = *params_[p];
      if (!param.grad_defined()) continue;
      const std::vector<S>& g = param.grad();
      std::vector<S>& w = param.values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m_[p][j] = config_.beta1 * m_[p][j] + (1.0 - config_.beta1) * gj;
        v_[p][j] = config_.beta2 * v_[p][j] + (1.0 - config_.beta2) * gj * gj;
        const double mhat = m_[p][j] / bc1;
        const double vhat = v_[p][j] / bc2;
        const double update = mhat / (std::sqrt(vhat) + config_.eps) +
                              config_.weight_decay * static_cast<double>(w[j]);
        w[j] = static_cast<S>(static_cast<double>(w[j]) - config_.lr * update);
      }
    }
  }

  void zero_grad() {
    for (TensorT<S>* param : params_) param->zero_grad();
  }

 private:
  std::vector<TensorT<S>*> params_;
  AdamWConfig config_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

using AdamW = AdamWT<float>;

/// Scales gradients so their global L2 norm is at most max_norm. Returns the
/// norm before clipping.
template <typename S>
double clip_global_norm(const std::vector<TensorT<S>*>& params, double max_norm) {
  if (max_norm <= 0.0) {
    fail(ErrorKind::invalid_argument, "max_norm must be positive, got " +
                                          std::to_string(max_norm));
  }
  double sq = 0.0;
  for (TensorT<S>* param : params) {
    if (!param->grad_defined()) continue;
    for (const S g : param->grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (TensorT<S>* param : params) {
      if (!param->grad_defined()) continue;
      for (S& g : param->grad()) g = static_cast<S>(g * scale);
    }
  }
  return norm;
}

/// Learning-rate schedules: constant, or linear warmup (possibly zero steps)
/// followed by linear decay to zero at total_steps.
class LrSchedule {
 public:
  static LrSchedule constant(double base_lr) { return LrSchedule(base_lr, 0, 0, true); }

  static LrSchedule linear(double base_lr, std::size_t warmup_steps,
                           std::size_t total_steps) {
    if (total_steps == 0) {
      fail(ErrorKind::invalid_argument, "linear schedule needs total_steps > 0");
    }
    if (warmup_steps > total_steps) {
      fail(ErrorKind::invalid_argument, "warmup cannot exceed total steps");
    }
    return LrSchedule(base_lr, warmup_steps, total_steps, false);
  }

  static LrSchedule named(const std::string& name, double base_lr,
                          std::size_t warmup_steps, std::size_t total_steps) {
    if (name == "constant") return constant(base_lr);
    if (name == "linear") return linear(base_lr, warmup_steps, total_steps);
    fail(ErrorKind::config, "unknown learning rate schedule \"" + name + "\"");
  }

  /// Learning rate for 1-based optimizer step `step`; the first post-warmup
  /// step runs at the full base rate, the last at just above zero.
  double at(std::size_t step) const {
    if (constant_) return base_lr_;
    if (step <= warmup_) {
      return base_lr_ * static_cast<double>(step) / static_cast<double>(warmup_);
    }
    const double span = static_cast<double>(total_ - warmup_);
    const double done = static_cast<double>(std::min(step, total_) - warmup_ - 1);
    return span <= 0.0 ? 0.0 : base_lr_ * (span - done) / span;
  }

 private:
  LrSchedule(double base_lr, std::size_t warmup, std::size_t total, bool constant)
      : base_lr_(base_lr), warmup_(warmup), total_(total), constant_(constant) {}

  double base_lr_;
  std::size_t warmup_;
  std::size_t total_;
  bool constant_;
};

}  // namespace distillforge
