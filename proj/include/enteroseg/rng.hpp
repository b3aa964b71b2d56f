#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace enteroseg {

// Seeded generator whose draws are identical across standard libraries.
// std::uniform_*_distribution and std::shuffle are implementation-defined,
// so the few draws we need are derived directly from mt19937_64 output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling removes modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; one value per call keeps the stream position simple.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  // Independent child stream, e.g. one per data-loading worker.
  Rng split(std::uint64_t stream) {
    return Rng(engine_() ^ (0x9E3779B97F4A7C15ULL * (stream + 1)));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace enteroseg
