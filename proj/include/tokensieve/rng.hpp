// Copyright 2026 The tokensieve Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace tokensieve {

// Deterministic random stream. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard; the conversions to uniform, normal and
// Gumbel variates are implemented here rather than with <random>
// distributions, which differ between standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // (0, 1): never returns 0, so log() is always finite.
  double uniform_open() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }
  double normal();
  double gumbel();
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Seed-splitting rule for independent substreams:
//   splitmix64(master ^ fnv1a64(tag) ^ splitmix64(index + 1)).
// Every consumer (parameter init, scene i, Gumbel noise at step s, ...)
// draws from its own substream so adding a consumer never shifts another.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0);

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace tokensieve
