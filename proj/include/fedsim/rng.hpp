#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fedsim {

// Combines seed components into one stream seed (splitmix64 finalizer per part).
uint64_t mix_seed(std::initializer_list<uint64_t> parts);

// Deterministic random source. mt19937_64 supplies bits (its sequence is fixed
// by the standard); the uniform/normal mappings are implemented here so results
// do not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform();

  // Uniform integer in [0, n), n >= 1. Rejection sampling, unbiased.
  uint64_t uniform_int(uint64_t n);

  // Box-Muller. Draws two uniforms per pair of normals; one is cached.
  double normal(double mean = 0.0, double stddev = 1.0);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fedsim
