#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>

namespace sdream {

/// splitmix64 finalizer; used for seeding and for deriving substreams.
constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// xoshiro256** 1.0 seeded through splitmix64.
///
/// All distributions are implemented here (not via <random>) so that a given
/// seed produces the same stream on every platform and standard library.
///
/// Stream splitting: Rng::derive(seed, {tag0, tag1, ...}) folds each tag into
/// a splitmix64 chain started from `seed` and seeds a fresh generator from the
/// result. Distinct tag tuples give statistically independent streams.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0) noexcept {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64(sm);
  }

  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t sm = seed;
    std::uint64_t key = splitmix64(sm);
    for (std::uint64_t tag : tags) {
      std::uint64_t mix = key ^ (tag + 0x632be59bd9b4e019ULL);
      key = splitmix64(mix);
    }
    return Rng(key);
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept { return next(); }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) by rejection. n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t r;
    do {
      r = next();
    } while (r >= limit);
    return r % n;
  }

  /// Fisher-Yates shuffle with this generator.
  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
};

}  // namespace sdream
