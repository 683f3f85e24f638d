#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace distillforge {

enum class ErrorKind {
  invalid_argument,
  shape_mismatch,
  config,
  io,
  parse,
  version,
  data,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

/// Token ids for a padded batch, row-major [batch, len].
/// Label value excluded from loss computation.
constexpr std::int32_t kIgnoreLabel = -100;

struct IdBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::size_t b, std::size_t l) const { return ids[b * len + l]; }
  std::int32_t& at(std::size_t b, std::size_t l) { return ids[b * len + l]; }
  std::size_t size() const { return ids.size(); }
};

// All randomness flows through mt19937_64 with the explicit draw helpers
// below; std:: distributions are implementation-defined and would break
// seed-for-seed reproducibility across standard libraries.
using Rng = std::mt19937_64;

inline double uniform_unit(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform_unit(rng);
}

inline double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(uniform_real(rng, std::log(lo), std::log(hi)));
}

inline bool bernoulli(Rng& rng, double p) { return uniform_unit(rng) < p; }

/// Unbiased integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  if (n == 0) fail(ErrorKind::invalid_argument, "uniform_index: n must be positive");
  const std::uint64_t bound = std::numeric_limits<std::uint64_t>::max() / n * n;
  std::uint64_t x = rng();
  while (x >= bound) x = rng();
  return static_cast<std::size_t>(x % n);
}

inline double normal_sample(Rng& rng, double mean, double stddev) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double u1 = uniform_unit(rng);
  while (u1 <= 0.0) u1 = uniform_unit(rng);
  const double u2 = uniform_unit(rng);
  return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

/// Thread cap: DISTILLFORGE_THREADS if set, else hardware concurrency.
inline unsigned max_threads() {
  static const unsigned cached = [] {
    if (const char* env = std::getenv("DISTILLFORGE_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<unsigned>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1u : hw;
  }();
  return cached;
}

/// Runs body(i) for i in [0, count) across up to max_threads() workers.
/// The caller is responsible for making bodies data-race free.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body) {
  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(max_threads(), count));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count || failed.load()) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned t = 0; t < workers; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  out += "]";
  return out;
}

}  // namespace distillforge
