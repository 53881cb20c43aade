#pragma once

#include <bit>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "raw tensor payloads are little-endian");

namespace cineseg {

// Exit-code contract of the CLI: 2 config, 3 data, 4 numeric.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}
inline void require_data(bool ok, const std::string& msg) {
  if (!ok) throw DataError(msg);
}

inline std::string strprintf(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  char buf[512];
  vsnprintf(buf, sizeof(buf), fmt, ap);
  va_end(ap);
  return std::string(buf);
}

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream seed from a master seed and a salt chain.
inline uint64_t mix_seed(uint64_t seed, std::initializer_list<uint64_t> salts) {
  uint64_t s = seed;
  (void)splitmix64(s);
  for (uint64_t v : salts) {
    s ^= v + 0x9e3779b97f4a7c15ULL;
    (void)splitmix64(s);
  }
  return splitmix64(s);
}

// Deterministic RNG. mt19937_64 output is fixed by the standard, and all
// transforms below are hand-rolled so sequences never depend on the stdlib's
// distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  uint64_t bits() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  size_t index(size_t n) {
    // Rejection-free modulo bias is negligible for desk-scale n; use
    // multiply-shift which is exact for n << 2^53.
    return static_cast<size_t>(uniform() * static_cast<double>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached spare, one draw per pair).
  double normal() {
    double u1 = uniform(), u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  /// Normal truncated to +-2 sigma, the usual ViT init.
  double trunc_normal(double sigma) {
    for (;;) {
      double v = normal();
      if (std::fabs(v) <= 2.0) return v * sigma;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

/// Runs fn(i) for i in [0, n) over `threads` workers with contiguous chunks.
/// Each index is touched by exactly one worker, so writes to per-index slots
/// are race-free and results do not depend on the thread count. The first
/// worker exception is rethrown on the calling thread.
template <typename Fn>
void parallel_for(size_t n, int threads, Fn&& fn) {
  if (n == 0) return;
  int nt = threads;
  if (nt <= 0) nt = static_cast<int>(std::thread::hardware_concurrency());
  if (nt < 1) nt = 1;
  if (static_cast<size_t>(nt) > n) nt = static_cast<int>(n);
  if (nt == 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(nt);
  size_t chunk = (n + nt - 1) / nt;
  std::vector<std::exception_ptr> errors(nt);
  for (int t = 0; t < nt; ++t) {
    size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, t, &fn, &errors] {
      try {
        for (size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Contiguous-chunk variant exposing the worker index, for per-worker
/// accumulators that are later reduced in worker order. Chunk assignment
/// depends only on (n, threads), so results are reproducible for a fixed
/// thread count.
template <typename Fn>
void parallel_chunks(size_t n, int threads, Fn&& fn) {
  if (n == 0) return;
  int nt = threads;
  if (nt <= 0) nt = static_cast<int>(std::thread::hardware_concurrency());
  if (nt < 1) nt = 1;
  if (static_cast<size_t>(nt) > n) nt = static_cast<int>(n);
  size_t chunk = (n + nt - 1) / nt;
  if (nt == 1) {
    fn(size_t{0}, n, 0);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(nt);
  for (int t = 0; t < nt; ++t) {
    size_t lo = t * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, t, &fn, &errors] {
      try {
        fn(lo, hi, t);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline int default_threads() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  return static_cast<int>(hw > 4 ? 4 : hw);
}

/// Fixed-format float for CSV/report output; deterministic across runs.
inline std::string fmt_g(double v, int prec = 10) {
  return strprintf("%.*g", prec, v);
}

}  // namespace cineseg
