#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mvar {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stable sub-stream derivation so independent consumers (weight init, data
// order, candidate sampling, ...) never share a stream.
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  return splitmix64(base ^ splitmix64(stream + 1));
}

// mt19937_64 plus hand-rolled distributions. The std distributions are
// implementation-defined, these are not, so seeded runs replay exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t raw() { return gen_(); }

  // [0, 1)
  double uniform() { return (gen_() >> 11) * 0x1.0p-53; }

  // standard normal, Box-Muller (cos branch only)
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // [0, n), unbiased enough for desk-scale n
  int uniform_int(int n) {
    return int((unsigned __int128)gen_() * (unsigned)n >> 64);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace mvar
