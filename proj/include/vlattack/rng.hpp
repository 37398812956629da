#ifndef VLATTACK_RNG_HPP
#define VLATTACK_RNG_HPP

#include <cstdint>
#include <random>

namespace vlat {

// Seeded generator with platform-stable helpers. All randomness in the
// project flows through explicit Rng instances so runs reproduce exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next() { return eng_(); }

  // Uniform index in [0, n). Lemire multiply; bias is < 2^-64 per draw.
  size_t index(size_t n) {
    return static_cast<size_t>((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
};

// SplitMix64 step; used to derive independent per-item seeds from a run seed.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace vlat

#endif  // VLATTACK_RNG_HPP
