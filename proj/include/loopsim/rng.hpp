#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

namespace loopsim {

/// Counter-friendly 64-bit generator (splitmix64). Cheap to construct, so a
/// fresh substream can be derived per Monte Carlo round; results then depend
/// only on (seed, index), never on scheduling or worker count.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  result_type operator()() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

 private:
  std::uint64_t state_;
};

/// Mixes (base, a, b) into a well-spread substream seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                 std::uint64_t b = 0) {
  SplitMix64 g(base ^ (a * 0xD1342543DE82EF95ULL) ^
               (b * 0x2545F4914F6CDD1DULL));
  g();
  return g();
}

inline SplitMix64 substream(std::uint64_t seed, std::uint64_t index) {
  return SplitMix64(derive_seed(seed, index));
}

/// Uniform double in [0, 1) from the top 53 bits.
template <class Urbg>
double uniform_unit(Urbg& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller (one value per call, second discarded;
/// fine at desk scale and keeps per-call state out of the generator).
template <class Urbg>
double normal_unit(Urbg& rng) {
  double u1 = 0.0;
  while (u1 <= 0.0) u1 = uniform_unit(rng);
  const double u2 = uniform_unit(rng);
  constexpr double two_pi = 6.28318530717958647692;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

}  // namespace loopsim
