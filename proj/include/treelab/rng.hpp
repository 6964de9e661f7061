#pragma once

// Counter-based random numbers (Philox4x32-10) with explicit stream splitting.
//
// Every random draw in the library flows through Rng so that results are
// reproducible bit-for-bit across platforms. The standard <random>
// distributions are implementation-defined, so uniform/normal/integer
// variates are derived here from raw 32-bit words.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace treelab {

using PhiloxBlock = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

/// One Philox4x32 block with 10 rounds.
inline PhiloxBlock philox4x32_10(PhiloxBlock ctr, PhiloxKey key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kW0;
      key[1] += kW1;
    }
    const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

/// SplitMix64 finalizer; used only to derive child seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

class Rng {
public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  /// Independent generator for a named sub-task (stage, case, ...).
  /// Depends only on (seed, stream, id), never on how many draws were made.
  Rng split(std::uint64_t id) const {
    return Rng(mix64(seed_ ^ mix64(stream_ + 0x5851F42D4C957F2Dull)) ^ mix64(id + 1), 0);
  }

  std::uint32_t next_u32() {
    if (buffered_ == 0) {
      const PhiloxBlock ctr = {static_cast<std::uint32_t>(counter_),
                               static_cast<std::uint32_t>(counter_ >> 32),
                               static_cast<std::uint32_t>(stream_),
                               static_cast<std::uint32_t>(stream_ >> 32)};
      const PhiloxKey key = {static_cast<std::uint32_t>(seed_),
                             static_cast<std::uint32_t>(seed_ >> 32)};
      block_ = philox4x32_10(ctr, key);
      ++counter_;
      buffered_ = 4;
    }
    return block_[4 - buffered_--];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in the closed range [lo, hi] (unbiased, rejection sampling).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi <= lo) return lo;
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1u;
    if (span == 0) return static_cast<std::int64_t>(next_u64());
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % span);
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return lo + static_cast<std::int64_t>(r % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal variate (Box-Muller, one value per call pair cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  PhiloxBlock block_{};
  int buffered_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace treelab
