#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "sfr/common.hpp"

SFR_BEGIN_NAMESPACE

/// Counter-based random stream. Every draw is a pure function of
/// (key, counter), so a stream keyed by e.g. (seed, step, position, kind)
/// reproduces independently of the order in which other streams are used.
class CounterRng {
 public:
  CounterRng() = default;
  CounterRng(std::uint64_t key, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  /// Derives a key from a seed and any number of integer tags.
  static std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t k = mix(seed ^ 0x9e3779b97f4a7c15ULL);
    for (auto t : tags) k = mix(k ^ mix(t + 0x632be59bd9b4e019ULL));
    return k;
  }
  static CounterRng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    return CounterRng(derive(seed, tags));
  }

  std::uint64_t next_u64() { return mix(key_ ^ mix(counter_++ * 0xd1b54a32d192ed03ULL + 1)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw DomainError("CounterRng::below: empty range");
    // rejection sampling keeps the draw exactly uniform
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do x = next_u64();
    while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (one output per two uniforms).
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

SFR_END_NAMESPACE
