#pragma once

// Keyed random streams. Every stochastic block (a replication, a chain
// iteration, a sampler block) gets its own generator derived from a tuple of
// integers, so results do not depend on scheduling or thread count.

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace gaptide {

inline constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Folds an ordered list of integers into a single 64-bit key.
inline std::uint64_t derive_key(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t state = 0x6a09e667f3bcc909ULL;
  std::uint64_t key = 0;
  for (std::uint64_t part : parts) {
    state ^= part + 0x9e3779b97f4a7c15ULL + (key << 6) + (key >> 2);
    key = splitmix64(state);
  }
  return key;
}

/// xoshiro256++ engine; satisfies UniformRandomBitGenerator so it plugs into
/// the <random> distributions.
class Xoshiro256 {
 public:
  using result_type = std::uint64_t;

  explicit Xoshiro256(std::uint64_t seed = 0) noexcept { reseed(seed); }

  void reseed(std::uint64_t seed) noexcept {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() noexcept {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }
  std::array<std::uint64_t, 4> s_{};
};

/// Generator for the stream identified by `parts`.
inline Xoshiro256 keyed_stream(std::initializer_list<std::uint64_t> parts) noexcept {
  return Xoshiro256(derive_key(parts));
}

/// Uniform on the open interval (0, 1).
template <class Rng>
double uniform_open(Rng& rng) {
  // 53 random bits, shifted half a step away from zero.
  const std::uint64_t bits = rng() >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

template <class Rng>
double standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

/// Gamma(shape, rate) draw. Shape zero is the point mass at zero.
template <class Rng>
double gamma_draw(Rng& rng, double shape, double rate) {
  if (shape <= 0.0) return 0.0;
  std::gamma_distribution<double> dist(shape, 1.0 / rate);
  return dist(rng);
}

}  // namespace gaptide
