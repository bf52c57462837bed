#pragma once

#include <cstdint>
#include <initializer_list>

namespace auxdrop {

// Counter-based randomness. Every draw is a pure function of a seed and a
// tuple of integer keys, so independent consumers (feature availability,
// per-node dropout, weight initialization) never perturb each other and a
// layer can grow without shifting the draws of its existing nodes.

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_keys(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

/// Uniform double in [0, 1) from the top 53 bits of the hash.
constexpr double to_unit(std::uint64_t h) noexcept {
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Stream tags keep the key spaces of different consumers disjoint.
enum class RngTag : std::uint64_t {
  Init = 1,
  AuxDropout = 2,
  LayerDropout = 3,
  Availability = 4,
  Shuffle = 5,
  StreamSeed = 6,
  ModelSeed = 7,
  Test = 99,
};

class KeyedRng {
 public:
  constexpr KeyedRng() = default;
  constexpr explicit KeyedRng(std::uint64_t seed) : seed_(seed) {}

  [[nodiscard]] constexpr std::uint64_t seed() const noexcept { return seed_; }

  [[nodiscard]] constexpr std::uint64_t bits(RngTag tag, std::initializer_list<std::uint64_t> keys) const noexcept {
    return splitmix64(hash_keys(seed_, keys) ^ static_cast<std::uint64_t>(tag) * 0xd6e8feb86659fd93ULL);
  }

  [[nodiscard]] constexpr double uniform(RngTag tag, std::initializer_list<std::uint64_t> keys) const noexcept {
    return to_unit(bits(tag, keys));
  }

  /// Independent child seed, e.g. stream vs. model seeds of one run.
  [[nodiscard]] constexpr std::uint64_t derive(RngTag tag) const noexcept { return bits(tag, {0}); }

 private:
  std::uint64_t seed_ = 0;
};

/// Sequential generator over the keyed space, for places that need a plain
/// stream (shuffles, test data).
class SequenceRng {
 public:
  explicit SequenceRng(std::uint64_t seed, RngTag tag = RngTag::Test) : rng_(seed), tag_(tag) {}

  double uniform() { return rng_.uniform(tag_, {counter_++}); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % (n == 0 ? 1 : n);
  }

 private:
  KeyedRng rng_;
  RngTag tag_;
  std::uint64_t counter_ = 0;
};

}  // namespace auxdrop
