#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace gauge {

// Portable random stream.
//
// Raw bits come from std::mt19937_64, whose output sequence is fixed by the
// C++ standard. Every derived draw (uniform doubles, Gaussians, bounded
// integers) is computed here rather than through <random> distributions,
// whose algorithms are implementation-defined. Same seed, same bits, on any
// conforming toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform();

  // Standard normal via Box-Muller; the second variate is cached.
  double normal();

  // Uniform integer in [0, bound) by rejection; bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  // Independent stream for one (layer, site) pair. The child seed is a
  // SplitMix64 hash of (master seed, layer, tag) so streams do not overlap
  // in practice and can be generated in any order.
  static Rng stream(std::uint64_t master_seed, std::uint64_t layer, std::string_view site_tag);

 private:
  std::mt19937_64 engine_;
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// FNV-1a over a byte string.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace gauge
