#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace mp {

// Deterministic RNG. All draws go through hand-rolled transforms on top of
// mt19937_64 so that streams are bit-identical across platforms and compilers
// (std::*_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform double in [0, 1), 53-bit resolution.
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Inclusive uniform integer in [lo, hi], unbiased via rejection.
  int uniform_int(int lo, int hi) {
    const std::uint64_t n = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() / n * n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int>(x % n);
  }

  // Box-Muller with cached spare.
  float normal(float mean = 0.0f, float stddev = 1.0f) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + stddev * spare_;
    }
    const double u1 = 1.0 - next_unit();  // (0, 1]
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = static_cast<float>(r * std::sin(theta));
    has_spare_ = true;
    return mean + stddev * static_cast<float>(r * std::cos(theta));
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const int j = uniform_int(0, static_cast<int>(i) - 1);
      std::swap(v[i - 1], v[static_cast<std::size_t>(j)]);
    }
  }

  // Derive an independent stream from the original seed and a salt.
  Rng fork(std::uint64_t salt) const { return Rng(mix(seed_, salt)); }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  float spare_ = 0.0f;
};

}  // namespace mp
