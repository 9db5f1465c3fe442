#pragma once

#include <cstdint>
#include <random>

namespace percap {

// Single RNG threaded through every stochastic step of a run. One
// engine + seed => one trajectory, which is what makes reruns byte-identical.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::mt19937_64& engine() { return engine_; }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  double normal(double mean, double stddev) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(engine_);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace percap
