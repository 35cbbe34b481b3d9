#ifndef EGG_RNG_HPP
#define EGG_RNG_HPP

#include <cmath>
#include <cstdint>

namespace egg {

// Counter-based generator: every draw is a stateless hash of
// (seed, stream, counter), so independent streams derived from one master
// seed never interact and runs replay exactly.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream), counter_(0) {}

  // Derive a child stream; children are independent of the parent's future draws.
  RngStream fork(std::uint64_t substream) const {
    return RngStream(mix(seed_ ^ mix(stream_)), substream);
  }

  std::uint64_t next_u64() {
    std::uint64_t x = seed_;
    x = mix(x ^ (stream_ * 0x9E3779B97F4A7C15ULL));
    x = mix(x ^ (counter_++ * 0xBF58476D1CE4E5B9ULL));
    return x;
  }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    // splitmix64 finalizer
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace egg

#endif  // EGG_RNG_HPP
