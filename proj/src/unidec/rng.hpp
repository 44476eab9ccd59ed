#pragma once

#include <cstdint>
#include <random>

namespace unidec {

// Seeded RNG with hand-rolled distributions. The mt19937_64 engine is pinned
// by the standard; std distributions are not, so sampling is done here to keep
// generated data identical across toolchains.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive.
  int uniform_int(int lo, int hi);

  // Standard normal via Box-Muller with a cached spare.
  double normal();

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  uint64_t state_hash() const;

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace unidec
