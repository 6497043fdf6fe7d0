#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace rrl {

// Deterministic xoshiro256** generator seeded through splitmix64.
// Every sampling routine in the library takes one of these explicitly;
// nothing draws from hidden global state. Streams are splittable: a
// (seed, stream) pair names a generator, and split(k) derives the child
// (seed, mix(stream, k)) without disturbing the parent, so per-seed /
// per-fold work can be laid out as a tree of independent streams.
class Rng {
public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {
    std::uint64_t x = splitmix_(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
    for (auto& w : state_) {
      x += 0x9e3779b97f4a7c15ULL;
      w = mix_(x);
    }
    // xoshiro must not start from the all-zero state.
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  static constexpr std::uint64_t min() { return 0; }
  static constexpr std::uint64_t max() { return ~0ULL; }

  std::uint64_t operator()() {
    const std::uint64_t result = rotl_(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl_(state_[3], 45);
    return result;
  }

  // Child stream k; children with distinct k are decorrelated from each
  // other and from the parent regardless of how far the parent has run.
  Rng split(std::uint64_t k) const {
    return Rng(seed_, mix_(stream_ ^ (0xbf58476d1ce4e5b9ULL * (k + 1))));
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  // Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform on {0, .., n-1}, unbiased via rejection.
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = max() - max() % un;
    std::uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return static_cast<int>(x % un);
  }

  // Standard normal via Box-Muller (one value per call, no cache, so the
  // stream position is a pure function of the call count).
  double normal() {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  // Index i with probability probs[i] / sum(probs); inverse-CDF walk.
  // Tolerates slightly unnormalized rows; falls back to the last positive
  // entry if rounding pushes the draw past the cumulative sum.
  int categorical(const std::vector<double>& probs) {
    if (probs.empty()) throw std::invalid_argument("categorical: empty weights");
    double total = 0.0;
    for (double p : probs) {
      if (p < 0.0 || !std::isfinite(p))
        throw std::invalid_argument("categorical: weights must be finite and nonnegative");
      total += p;
    }
    if (total <= 0.0) throw std::invalid_argument("categorical: weights sum to zero");
    double u = uniform01() * total;
    int last_positive = -1;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] > 0.0) last_positive = static_cast<int>(i);
      u -= probs[i];
      if (u < 0.0 && probs[i] > 0.0) return static_cast<int>(i);
    }
    return last_positive;
  }

private:
  static std::uint64_t rotl_(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  static std::uint64_t mix_(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }
  static std::uint64_t splitmix_(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    return mix_(z);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::array<std::uint64_t, 4> state_;
};

}  // namespace rrl
