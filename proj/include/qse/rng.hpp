#pragma once

#include <cmath>
#include <cstdint>

namespace qse {

// splitmix64-based generator. The std distributions are implementation
// defined, so uniform/normal are derived by hand to keep every artifact
// byte-reproducible for a given seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    double u = uniform();
    if (u < 1e-300) u = 1e-300;  // keep log finite
    double v = uniform();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586 * v);
  }

  // Independent substream; stable regardless of draws from *this.
  Rng fork(std::uint64_t stream) const {
    return Rng(state_ ^ (0x632be59bd9b4e019ull * (stream + 1)));
  }

 private:
  std::uint64_t state_;
};

}  // namespace qse
