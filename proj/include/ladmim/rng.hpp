#pragma once

// Portable counter-based random numbers.
//
// Every draw is splitmix64(key + counter * golden), so the value depends only on
// (seed, stream, draw index). Distributions are implemented here rather than
// taken from <random> because the standard distributions are not specified
// bit-for-bit across library implementations.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace ladmim {

inline constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Purpose tags; changing e.g. the mask seed never perturbs weight init.
enum class Stream : std::uint64_t {
  init = 1,
  mask = 2,
  data = 3,
  eval = 4,
  backbone = 5,
  shuffle = 6,
};

class Rng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  Rng(std::uint64_t seed, Stream stream) : Rng(seed, static_cast<std::uint64_t>(stream)) {}
  Rng(std::uint64_t seed, std::uint64_t stream)
      : key_(splitmix64(seed ^ splitmix64(stream * kGolden + 0x632BE59BD9B4E019ULL))) {}

  // Independent child stream, e.g. one per image index.
  [[nodiscard]] Rng derive(std::uint64_t index) const {
    Rng child(0, 0);
    child.key_ = splitmix64(key_ ^ splitmix64(index + 0xD1B54A32D192ED03ULL));
    return child;
  }

  std::uint64_t next_u64() {
    ++counter_;
    return splitmix64(key_ + counter_ * kGolden);
  }

  [[nodiscard]] std::uint64_t draws() const { return counter_; }

  // Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Inclusive integer range.
  int range(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("Rng::range with hi < lo");
    return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // Box-Muller, one value per call.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Normal(0, sigma) truncated to [-2 sigma, 2 sigma] by rejection.
  double truncated_normal(double sigma) {
    double z = normal();
    while (std::abs(z) > 2.0) z = normal();
    return z * sigma;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace ladmim
