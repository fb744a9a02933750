#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace phylosmc {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Identifies which part of an algorithm a draw belongs to. Values are part of
// the reproducibility contract: changing them changes every seeded output.
enum class Stream : std::uint64_t {
  resample = 1,
  propose = 2,
  lookahead = 3,
  select = 4,
  minibatch = 5,
  gumbel = 6,
  simulate = 7,
  evaluation = 8,
};

// Counter-based generator: every draw is a pure function of (seed, key), so
// results do not depend on the order in which threads consume randomness.
class CounterRng {
 public:
  constexpr explicit CounterRng(std::uint64_t seed = 0) : seed_(seed) {}

  constexpr std::uint64_t seed() const { return seed_; }

  constexpr std::uint64_t bits(std::initializer_list<std::uint64_t> key) const {
    std::uint64_t h = splitmix64(seed_ ^ 0x6a09e667f3bcc909ULL);
    for (std::uint64_t k : key) h = splitmix64(h ^ splitmix64(k + 0x3c6ef372fe94f82bULL));
    return h;
  }

  // Uniform on the open interval (0, 1).
  double uniform(std::initializer_list<std::uint64_t> key) const {
    return (static_cast<double>(bits(key) >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard Gumbel variate -log(-log U).
  double gumbel(std::initializer_list<std::uint64_t> key) const {
    return -std::log(-std::log(uniform(key)));
  }

 private:
  std::uint64_t seed_;
};

// A fixed prefix of the key space: (stream, step, rank). Draws are then
// addressed by (particle, slot).
class DrawStream {
 public:
  DrawStream(const CounterRng& rng, Stream stream, std::uint64_t step, std::uint64_t rank)
      : rng_(rng), stream_(static_cast<std::uint64_t>(stream)), step_(step), rank_(rank) {}

  double uniform(std::uint64_t particle, std::uint64_t slot) const {
    return rng_.uniform({stream_, step_, rank_, particle, slot});
  }
  double gumbel(std::uint64_t particle, std::uint64_t slot) const {
    return rng_.gumbel({stream_, step_, rank_, particle, slot});
  }

 private:
  CounterRng rng_;
  std::uint64_t stream_;
  std::uint64_t step_;
  std::uint64_t rank_;
};

}  // namespace phylosmc
