#pragma once

#include <cstdint>
#include <random>

#include "macb/tensor.hpp"

namespace macb {

/// Seeded generator threaded through every initializer and sampler. Same
/// seed, same platform: bit-identical stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  std::uint64_t next() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

  Tensor uniform_tensor(Shape shape, double lo, double hi);
  Tensor normal_tensor(Shape shape, double mean = 0.0, double stddev = 1.0);
  // Glorot-uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
  Tensor xavier(Shape shape, std::size_t fan_in, std::size_t fan_out);

 private:
  std::mt19937_64 engine_;
};

// Derive an independent stream seed from a base seed and a salt.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);

}  // namespace macb
