// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace ckv {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Counter-based generator: the value at (stream, counter) depends only on
/// (key, stream, counter), so any entry can be regenerated independently.
/// Distributions are hand-rolled so output is identical across standard
/// library implementations.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key, std::uint64_t stream = 0)
      : key_(mix64(key ^ mix64(stream + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t bits(std::uint64_t counter) const { return mix64(key_ ^ mix64(counter)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform(std::uint64_t counter) const {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  double uniform(std::uint64_t counter, double lo, double hi) const {
    return lo + (hi - lo) * uniform(counter);
  }

  /// Standard normal via Box-Muller on two sub-counters.
  double normal(std::uint64_t counter) const {
    const double u1 = 1.0 - uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t counter, std::uint64_t n) const {
    return static_cast<std::uint64_t>(uniform(counter) * static_cast<double>(n)) % n;
  }

 private:
  std::uint64_t key_;
};

/// Sequential convenience wrapper over CounterRng.
class SeqRng {
 public:
  explicit SeqRng(std::uint64_t key, std::uint64_t stream = 0) : rng_(key, stream) {}
  double uniform() { return rng_.uniform(next_++); }
  double uniform(double lo, double hi) { return rng_.uniform(next_++, lo, hi); }
  double normal() { return rng_.normal(next_++); }
  std::uint64_t below(std::uint64_t n) { return rng_.below(next_++, n); }

 private:
  CounterRng rng_;
  std::uint64_t next_ = 0;
};

}  // namespace ckv
