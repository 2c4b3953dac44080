#pragma once

#include <atomic>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace steersim {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Loads must stay strictly below 1 wherever -log(1-rho) has to remain finite.
constexpr double kRhoCap = 1.0 - 1e-6;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InsufficientHistory : public std::runtime_error {
 public:
  InsufficientHistory() : std::runtime_error("insufficient history") {}
  explicit InsufficientHistory(const std::string& what) : std::runtime_error(what) {}
};

inline void require_dim(bool ok, const std::string& axis, long expected, long got) {
  if (!ok) {
    throw DimensionError("dimension mismatch on axis '" + axis + "': expected " +
                         std::to_string(expected) + ", got " + std::to_string(got));
  }
}

// ---------------------------------------------------------------------------
// Seeding: one global seed fans out into named, order-independent streams.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Stream for a named component: independent of the order components are created in.
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& name) {
  return splitmix64(base ^ fnv1a64(name));
}

inline std::uint64_t derive_seed(std::uint64_t base, const std::string& name, std::uint64_t index) {
  return splitmix64(derive_seed(base, name) ^ splitmix64(index));
}

// ---------------------------------------------------------------------------
// Deterministic parallel loop. Work is split into fixed-size chunks so results
// never depend on the number of worker threads; each index owns its output slot.
// ---------------------------------------------------------------------------

inline void parallel_for(long n, const std::function<void(long)>& body, long grain = 16) {
  if (n <= 0) return;
  unsigned hw = std::thread::hardware_concurrency();
  if (hw <= 1 || n <= grain) {
    for (long i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<long> next_chunk{0};
  const long num_chunks = (n + grain - 1) / grain;
  auto worker = [&]() {
    for (;;) {
      long c = next_chunk.fetch_add(1);
      if (c >= num_chunks) return;
      const long lo = c * grain;
      const long hi = std::min(n, lo + grain);
      for (long i = lo; i < hi; ++i) body(i);
    }
  };
  unsigned num_threads = std::min<unsigned>(hw, static_cast<unsigned>(num_chunks));
  std::vector<std::thread> threads;
  threads.reserve(num_threads - 1);
  for (unsigned t = 1; t < num_threads; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
}

// ---------------------------------------------------------------------------
// Float formatting. fmt_g(x, 17) round-trips doubles exactly; 12 is the
// report precision. Infinities print as "inf"/"-inf" and parse back via stod.
// ---------------------------------------------------------------------------

inline std::string fmt_g(double x, int digits) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, x);
  return buf;
}

inline std::string hex16(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

}  // namespace steersim
