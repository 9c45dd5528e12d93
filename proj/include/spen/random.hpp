#pragma once

#include <cstdint>
#include <random>

namespace spen {

/// Seeded generator used for every stochastic step (initialization, data
/// synthesis, shuffling). Normal draws use the Box-Muller transform over
/// 53-bit uniforms from mt19937_64, so streams are reproducible given the
/// seed on any standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double normal();

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace spen
