#ifndef MTSEG_RNG_HPP
#define MTSEG_RNG_HPP

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace mtseg {

// Self-contained generators so that a seed produces the same stream on every
// standard library. std::uniform_*_distribution output is
// implementation-defined and would break byte-identical reruns.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// xoshiro256++ (Blackman & Vigna), seeded through splitmix64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto& w : s_) {
      sm = splitmix64(sm);
      w = sm;
    }
  }

  std::uint64_t next_u64() {
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

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n); n > 0
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(
        (static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n)) >> 64);
  }

  // standard normal, Box-Muller with one cached draw
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t s_[4];
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Stream tags for deriving independent substreams from one run seed.
// Keyed derivation (rather than one shared engine) keeps every stochastic
// choice a pure function of (seed, scope), so reruns and resumed runs
// reproduce the same draws.
namespace streams {
inline constexpr std::uint64_t kInit = 0x11;
inline constexpr std::uint64_t kShuffle = 0x22;
inline constexpr std::uint64_t kAugment = 0x33;
inline constexpr std::uint64_t kSynth = 0x44;
inline constexpr std::uint64_t kRegNoise = 0x55;
inline constexpr std::uint64_t kBootstrap = 0x66;
inline constexpr std::uint64_t kFolds = 0x77;
}  // namespace streams

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t v : path) h = splitmix64(h ^ (v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2)));
  return h;
}

inline Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  return Rng(derive_seed(seed, path));
}

}  // namespace mtseg

#endif  // MTSEG_RNG_HPP
