#pragma once

// Shared plumbing: error type, stable hashing, keyed random streams,
// deterministic number formatting and a small index-ordered parallel loop.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <thread>
#include <utility>
#include <vector>

namespace costep {

// Domain error with a machine-readable code ("invalid-trace",
// "index-out-of-range", "policy-failure", ...). The CLI maps these to exit 1.
class Error : public std::runtime_error {
public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

private:
  std::string code_;
};

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) noexcept {
  for (unsigned char c : s) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Order-sensitive combination of 64-bit words and strings into one key.
class KeyBuilder {
public:
  explicit KeyBuilder(std::uint64_t seed) : h_(mix64(seed)) {}

  KeyBuilder& add(std::uint64_t v) {
    h_ = mix64(h_ ^ mix64(v + 0x632be59bd9b4e019ULL));
    return *this;
  }
  KeyBuilder& add(std::string_view s) {
    // length prefix keeps ("ab","c") distinct from ("a","bc")
    add(static_cast<std::uint64_t>(s.size()));
    return add(fnv1a(s));
  }

  std::uint64_t key() const noexcept { return h_; }

private:
  std::uint64_t h_;
};

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

// splitmix64; satisfies UniformRandomBitGenerator. All derived quantities
// (uniforms, normals) are computed here rather than with <random>
// distributions, whose algorithms differ between standard libraries.
class Stream {
public:
  using result_type = std::uint64_t;

  explicit Stream(std::uint64_t key) : state_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() noexcept {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; the bias is < n / 2^64, irrelevant here.
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  double normal() noexcept {
    // Box-Muller, one value per call.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Gaussian(mean, sigma) restricted to [lo, hi] by rejection.
  double truncated_normal(double mean, double sigma, double lo = 0.0, double hi = 1.0) noexcept {
    if (sigma <= 0.0) return std::clamp(mean, lo, hi);
    for (int i = 0; i < 10000; ++i) {
      const double x = mean + sigma * normal();
      if (x >= lo && x <= hi) return x;
    }
    // Only reachable when [lo, hi] sits many sigmas away from the mean.
    return std::clamp(mean, lo, hi);
  }

private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

// Shortest decimal text that parses back to exactly the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw Error("parse", "not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return out;
}

// ---------------------------------------------------------------------------
// Parallelism
// ---------------------------------------------------------------------------

inline unsigned default_jobs() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

// Runs fn(i) for i in [0, count) on up to `jobs` threads. Callers write
// results by index, so output never depends on scheduling. The first
// exception thrown by any task is rethrown after all workers join.
template <class Fn>
void parallel_for(std::size_t count, unsigned jobs, Fn&& fn) {
  if (jobs <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next.store(count);
      }
    }
  };
  const unsigned n = static_cast<unsigned>(std::min<std::size_t>(jobs, count));
  std::vector<std::thread> pool;
  pool.reserve(n);
  for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace costep
