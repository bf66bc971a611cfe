#ifndef DIDA_RNG_HPP_
#define DIDA_RNG_HPP_

#include <cstdint>

namespace dida {

/// SplitMix64 (Steele, Lea, Flood 2014). Chosen over std distributions so
/// generated fixtures are bit-identical across platforms and standard
/// library versions. Constants: gamma 0x9E3779B97F4A7C15, mix multipliers
/// 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(next_u64() %
                                 static_cast<std::uint64_t>(hi - lo + 1));
  }

  bool coin() { return (next_u64() & 1u) != 0; }

 private:
  std::uint64_t state_;
};

/// Derives an independent stream for (seed, index) pairs, e.g. one stream
/// per scene. A SplitMix64 step of the mixed pair decorrelates streams.
inline Rng substream(std::uint64_t seed, std::uint64_t index) {
  Rng mixer(seed ^ (0x9E3779B97F4A7C15ULL * (index + 1)));
  return Rng(mixer.next_u64());
}

}  // namespace dida

#endif  // DIDA_RNG_HPP_
