#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace sheaflab {

// Deterministic RNG. All distributions are implemented by hand on top of
// mt19937_64 so that streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in (0, 1); never returns exactly 0 or 1.
  double uniform_open() {
    for (;;) {
      double u = (gen_() >> 11) * 0x1.0p-53;  // [0, 1)
      if (u > 0.0) return u;
    }
  }

  // Uniform in [0, 1).
  double uniform() { return (gen_() >> 11) * 0x1.0p-53; }

  double normal() {
    // Box-Muller; the spare is discarded to keep the stream position simple.
    double u1 = uniform_open();
    double u2 = uniform_open();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    for (;;) {
      std::uint64_t v = gen_();
      if (v < limit) return v % n;
    }
  }

 private:
  std::mt19937_64 gen_;
};

// splitmix64 finalizer; used to derive independent per-run seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace sheaflab
