#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace drivekd {

inline constexpr uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

// SplitMix64 finalizer. Pure integer arithmetic, identical on every platform.
inline constexpr uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Counter-based random stream: every draw is a pure function of
/// (id, seed, counter), so any draw can be replayed by resetting the counter
/// and parallel consumers never interfere as long as their ids differ.
class RngStream {
 public:
  RngStream(std::string_view name, uint64_t seed)
      : id_(fnv1a64(name)), seed_(seed) {}
  RngStream(uint64_t id, uint64_t seed) : id_(id), seed_(seed) {}

  uint64_t next_u64() {
    uint64_t v = mix64(seed_ ^ mix64(id_ ^ mix64(counter_)));
    ++counter_;
    return v;
  }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer in [0, n). n must be > 0.
  int uniform_int(int n) {
    return static_cast<int>(uniform() * static_cast<double>(n));
  }

  /// Standard normal via Box-Muller (cosine branch). Consumes two draws.
  float normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    double r = std::sqrt(-2.0 * std::log(u1));
    return static_cast<float>(r * std::cos(2.0 * std::numbers::pi * u2));
  }

  uint64_t id() const { return id_; }
  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }

 private:
  uint64_t id_;
  uint64_t seed_;
  uint64_t counter_ = 0;
};

}  // namespace drivekd
