#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace unext {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched tensor geometry (extents, ranks, channel counts).
class ShapeError : public Error {
 public:
  using Error::Error;
};
// Operation invoked outside its contract (non-scalar loss, consumed tape, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};
// Malformed file contents (checkpoint, image).
class FormatError : public Error {
 public:
  using Error::Error;
};
class TrainError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// -------------------------------------------------------------------------
// Global knobs

inline std::atomic<int>& compute_threads_ref() {
  static std::atomic<int> v{1};
  return v;
}
inline int compute_threads() { return compute_threads_ref().load(std::memory_order_relaxed); }
inline void set_compute_threads(int n) {
  compute_threads_ref().store(n < 1 ? 1 : n, std::memory_order_relaxed);
}

inline std::atomic<bool>& finite_checks_ref() {
  static std::atomic<bool> v{false};
  return v;
}
inline bool finite_checks_enabled() { return finite_checks_ref().load(std::memory_order_relaxed); }
inline void set_finite_checks(bool on) { finite_checks_ref().store(on, std::memory_order_relaxed); }

// -------------------------------------------------------------------------
// Deterministic RNG. The generator and the bit-to-double mapping are fixed
// here so a given seed yields the same stream everywhere; the standard
// distributions are implementation-defined and unusable for that.

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}
  Rng(uint64_t seed, uint64_t stream) : gen_(mix(seed, stream)) {}

  static uint64_t mix(uint64_t a, uint64_t b) {
    // splitmix64 over the pair
    uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t next_u64() { return gen_(); }

  // [lo, hi)
  double uniform(double lo, double hi) {
    const double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform(0.0, 1.0);
    } while (u1 <= 0.0);
    const double u2 = uniform(0.0, 1.0);
    const double r = std::sqrt(-2.0 * std::log(u1));
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(kTwoPi * u2);
    have_spare_ = true;
    return mean + stddev * r * std::cos(kTwoPi * u2);
  }

  // [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const int64_t n = last - first;
    for (int64_t i = n - 1; i > 0; --i) {
      std::swap(first[i], first[uniform_int(0, i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// -------------------------------------------------------------------------
// parallel_for splits [0, n) into contiguous chunks, one worker each; every
// index is handled by exactly one worker, so results are identical for any
// thread count.

template <typename F>
void parallel_for(int64_t n, F&& fn) {
  const int threads = compute_threads();
  if (threads <= 1 || n < 2) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int64_t workers = std::min<int64_t>(threads, n);
  const int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers - 1));
  for (int64_t w = 1; w < workers; ++w) {
    const int64_t lo = w * chunk;
    const int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (int64_t i = 0; i < std::min(chunk, n); ++i) fn(i);
  for (auto& th : pool) th.join();
}

}  // namespace unext
