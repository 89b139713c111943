#pragma once

// Deterministic randomness. mt19937_64 output is pinned by the standard, but
// the <random> distributions are not, so all sampling is done by hand here.
// Same seed, same call sequence -> same values on every platform.

#include <cstdint>
#include <cmath>
#include <vector>

namespace dp {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stream derivation for independent substreams (per sample, per worker).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 0x632be59bd9b4e019ull));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    // mt19937_64 seeding per std::mersenne_twister_engine(result_type) rules.
    state_[0] = seed;
    for (unsigned i = 1; i < kN; ++i)
      state_[i] = 6364136223846793005ull * (state_[i - 1] ^ (state_[i - 1] >> 62)) + i;
    index_ = kN;
  }

  std::uint64_t next_u64() {
    if (index_ >= kN) twist();
    std::uint64_t x = state_[index_++];
    x ^= (x >> 29) & 0x5555555555555555ull;
    x ^= (x << 17) & 0x71d67fffeda60000ull;
    x ^= (x << 37) & 0xfff7eee000000000ull;
    x ^= x >> 43;
    return x;
  }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive bounds, rejection sampling, no modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(next_u64());  // full range
    const std::uint64_t limit = ~0ull - ~0ull % span;
    std::uint64_t x;
    do { x = next_u64(); } while (x >= limit);
    return lo + static_cast<std::int64_t>(x % span);
  }

  // Box-Muller; caches the second variate.
  double normal() {
    if (have_cached_) { have_cached_ = false; return cached_; }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      const std::int64_t j = uniform_int(0, i);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  static constexpr unsigned kN = 312, kM = 156;
  static constexpr std::uint64_t kMatrixA = 0xb5026f5aa96619e9ull;
  static constexpr std::uint64_t kUpperMask = 0xffffffff80000000ull;
  static constexpr std::uint64_t kLowerMask = 0x7fffffffull;

  void twist() {
    for (unsigned i = 0; i < kN; ++i) {
      const std::uint64_t x = (state_[i] & kUpperMask) | (state_[(i + 1) % kN] & kLowerMask);
      std::uint64_t y = x >> 1;
      if (x & 1ull) y ^= kMatrixA;
      state_[i] = state_[(i + kM) % kN] ^ y;
    }
    index_ = 0;
  }

  std::uint64_t state_[kN];
  unsigned index_;
  bool have_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace dp
