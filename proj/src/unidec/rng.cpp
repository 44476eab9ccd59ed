#include "unidec/rng.hpp"

#include <cmath>

namespace unidec {

int Rng::uniform_int(int lo, int hi) {
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

uint64_t Rng::state_hash() const {
  // Cheap fingerprint for checkpoint metadata; engine copies are fine here.
  std::mt19937_64 copy = eng_;
  uint64_t h = 1469598103934665603ull;
  for (int i = 0; i < 4; ++i) {
    h ^= copy();
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace unidec
