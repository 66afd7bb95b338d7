#include "aqcf/rng.hpp"

#include <cmath>
#include <numbers>

namespace aqcf {

std::uint64_t Rng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // rejection keeps the draw exactly uniform
  const std::uint64_t limit = max() - max() % n;
  std::uint64_t x;
  do x = (*this)();
  while (x >= limit);
  return x % n;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace aqcf
