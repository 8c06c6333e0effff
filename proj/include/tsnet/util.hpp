#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace tsnet {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
struct DimensionError : Error {
  using Error::Error;
};

/// Invalid call-site input (empty clip, non-scalar loss, missing ground truth, ...).
struct InputError : Error {
  using Error::Error;
};

/// Invalid configuration value or file.
struct ConfigError : Error {
  using Error::Error;
};

/// Malformed on-disk payload; carries the byte offset where parsing failed.
struct FormatError : Error {
  size_t offset;
  FormatError(const std::string& msg, size_t at)
      : Error(msg + " (byte offset " + std::to_string(at) + ")"), offset(at) {}
};

struct IoError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic randomness
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Keyed per-item stream seed: independent of item order, stable across runs.
inline uint64_t stream_seed(uint64_t seed, std::string_view item_id) {
  return splitmix64(fnv1a64(item_id) ^ splitmix64(seed));
}

/// Seeded generator with pinned uniform/gaussian mappings so results do not
/// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Box-Muller transform; caches the spare value.
  double gaussian(double mean = 0.0, double sd = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + sd * spare_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return mean + sd * r * std::cos(a);
  }

  /// Uniform integer in [0, n). Lemire multiply-shift; n must be > 0.
  size_t index(size_t n) {
    return static_cast<size_t>((static_cast<unsigned __int128>(gen_()) * n) >> 64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Thread helpers
// ---------------------------------------------------------------------------

inline size_t worker_count() {
  if (const char* s = std::getenv("TSNET_THREADS")) {
    long v = std::strtol(s, nullptr, 10);
    if (v >= 1) return static_cast<size_t>(v);
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

/// Runs fn(i) for i in [0, n) across worker threads. fn must only touch
/// state owned by index i; output order is the caller's to reduce.
template <class Fn>
void parallel_items(size_t n, Fn&& fn, size_t threads = worker_count()) {
  if (n == 0) return;
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  std::exception_ptr err;
  std::mutex err_mu;
  for (size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

inline std::string shape_str(const std::vector<size_t>& dims) {
  std::string s = "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

}  // namespace tsnet
