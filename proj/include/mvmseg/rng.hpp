#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace mvmseg {

/// Deterministic random source. All draws are derived from the raw
/// mt19937_64 output stream with fixed arithmetic, so sequences are
/// reproducible across platforms and compilers (the std:: distribution
/// objects are implementation-defined and are deliberately not used).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  /// Uniform double in [0, 1).
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased (rejection sampling).
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    const std::uint64_t un = std::uint64_t(n);
    const std::uint64_t limit = ~std::uint64_t(0) - ~std::uint64_t(0) % un;
    std::uint64_t r = eng_();
    while (r >= limit) r = eng_();
    return int(r % un);
  }

  /// Standard normal via Box-Muller. The second deviate of each pair is
  /// cached, which keeps the stream deterministic but means interleaving
  /// normal() with other draws consumes engine words in a fixed pattern.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  /// Independent child stream; children with distinct indices never collide
  /// with each other or with the parent.
  Rng fork(std::uint64_t stream) const { return Rng(splitmix(seed_ ^ (0x9e3779b97f4a7c15ull * (stream + 1)))); }

  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mvmseg
