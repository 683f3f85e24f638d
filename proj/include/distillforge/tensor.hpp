#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "distillforge/common.hpp"

namespace distillforge {

template <typename S>
class TapeT;

/// Dense row-major tensor handle with shared storage. Values are written once
/// by the producing op; only the grad buffer mutates afterwards. Gradients
/// accumulate across backward calls until zero_grad().
template <typename S>
class TensorT {
 public:
  using Scalar = S;

  struct State {
    std::vector<std::size_t> shape;
    std::vector<S> values;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool on_grad_path = false;
  };

  TensorT() = default;

  static TensorT zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    return with_fill(std::move(shape), S(0), requires_grad);
  }

  static TensorT full(std::vector<std::size_t> shape, S value, bool requires_grad = false) {
    return with_fill(std::move(shape), value, requires_grad);
  }

  static TensorT scalar(S value) {
    return from_data({1}, std::vector<S>{value});
  }

  static TensorT from_data(std::vector<std::size_t> shape, std::vector<S> values,
                           bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    if (values.size() != n) {
      fail(ErrorKind::shape_mismatch,
           "tensor data length " + std::to_string(values.size()) +
               " does not match shape " + shape_to_string(shape));
    }
    TensorT t;
    t.state_ = std::make_shared<State>();
    t.state_->shape = std::move(shape);
    t.state_->values = std::move(values);
    t.state_->requires_grad = requires_grad;
    return t;
  }

  static TensorT randn(std::vector<std::size_t> shape, Rng& rng, double stddev,
                       bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    std::vector<S> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = static_cast<S>(normal_sample(rng, 0.0, stddev));
    }
    return from_data(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const { return state_ != nullptr; }

  const std::vector<std::size_t>& shape() const { return state_->shape; }
  std::size_t rank() const { return state_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return state_->shape[axis]; }
  std::size_t numel() const { return state_->values.size(); }

  std::vector<S>& values() { return state_->values; }
  const std::vector<S>& values() const { return state_->values; }

  S item() const {
    if (numel() != 1) {
      fail(ErrorKind::invalid_argument,
           "item() requires a scalar tensor, got shape " + shape_to_string(shape()));
    }
    return state_->values[0];
  }

  bool requires_grad() const { return state_->requires_grad; }
  void set_requires_grad(bool flag) { state_->requires_grad = flag; }
  bool on_grad_path() const { return state_->on_grad_path; }

  bool grad_defined() const { return !state_->grad.empty(); }

  /// Gradient buffer, allocated as zeros on first access.
  std::vector<S>& grad() {
    if (state_->grad.empty()) state_->grad.assign(state_->values.size(), S(0));
    return state_->grad;
  }

  const std::vector<S>& grad() const { return state_->grad; }

  void zero_grad() { state_->grad.clear(); }

  /// Storage identity; two handles share parameters iff these compare equal.
  const void* data_id() const { return static_cast<const void*>(state_.get()); }

  std::shared_ptr<State> state() const { return state_; }

  static std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

 private:
  static TensorT with_fill(std::vector<std::size_t> shape, S value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    TensorT t;
    t.state_ = std::make_shared<State>();
    t.state_->shape = std::move(shape);
    t.state_->values.assign(n, value);
    t.state_->requires_grad = requires_grad;
    return t;
  }

  template <typename U>
  friend class TapeT;

  std::shared_ptr<State> state_;
};

/// Ordered record of executed ops. Ops push their adjoint closures during the
/// forward pass; backward() replays them newest-first, which is a reverse
/// topological order because inputs always precede their consumers.
///
/// A tape is single-threaded. Backward does not clear the tape; leaf
/// gradients persist, so running backward twice adds the gradient twice.
/// Op-output gradients are pass-local and reset on every call, otherwise a
/// second pass would compound stale values through the chain rule.
template <typename S>
class TapeT {
 public:
  void record(std::shared_ptr<typename TensorT<S>::State> output,
              std::function<void()> adjoint) {
    outputs_.push_back(std::move(output));
    entries_.push_back(std::move(adjoint));
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  void backward(const TensorT<S>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      fail(ErrorKind::invalid_argument, "backward: loss must be a scalar tensor");
    }
    if (entries_.empty()) {
      fail(ErrorKind::invalid_argument, "backward: tape is empty");
    }
    for (auto& out : outputs_) out->grad.clear();
    auto state = loss.state();
    if (state->grad.empty()) state->grad.assign(1, S(0));
    state->grad[0] += S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::shared_ptr<typename TensorT<S>::State>> outputs_;
  std::vector<std::function<void()>> entries_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

namespace detail {

/// True when the op must be recorded: a tape is active and some input can
/// reach a requires_grad leaf.
template <typename S>
inline bool tracked(const TapeT<S>* tape,
                    std::initializer_list<const TensorT<S>*> inputs) {
  if (tape == nullptr) return false;
  for (const TensorT<S>* t : inputs) {
    if (t->defined() && (t->requires_grad() || t->on_grad_path())) return true;
  }
  return false;
}

template <typename S>
inline void mark_output(TensorT<S>& out, bool tracked_flag) {
  out.state()->on_grad_path = tracked_flag;
}

/// Adds into the grad buffer of `state`, allocating zeros on first touch.
template <typename S>
inline std::vector<S>& ensure_grad(const std::shared_ptr<typename TensorT<S>::State>& state) {
  if (state->grad.empty()) state->grad.assign(state->values.size(), S(0));
  return state->grad;
}

/// Whether gradients should be propagated into this input at all.
template <typename S>
inline bool wants_grad(const std::shared_ptr<typename TensorT<S>::State>& state) {
  return state->requires_grad || state->on_grad_path;
}

}  // namespace detail

}  // namespace distillforge
