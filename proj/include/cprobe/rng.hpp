// SPDX-License-Identifier: Apache-2.0
//
// Seedable random source with a fixed algorithm. The bit generator is
// std::mt19937_64, whose output sequence is pinned by the standard; the
// derived distributions below are written out here because the standard
// library's distributions are implementation-defined.

#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace cprobe {

/// SplitMix64 finalizer, used to derive independent substream seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::uint64_t stream) : engine_(mix_seed(seed, stream)) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform integer in [0, bound) by rejection; bound must be > 0.
  std::uint64_t uniform_index(std::uint64_t bound);

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  /// k distinct indices from [0, n), returned in increasing order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::mt19937_64 engine_;
};

}  // namespace cprobe
