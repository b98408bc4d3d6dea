#pragma once

#include <cmath>
#include <limits>

namespace lomo {

// Largest finite binary16 value.
inline constexpr double kHalfMax = 65504.0;

// Rounds a double to the nearest binary16 value (ties to even) and returns it
// widened back to double. Magnitudes that round past kHalfMax become infinity;
// values below the smallest subnormal flush to a signed zero.
inline double round_to_half(double x) {
  if (!std::isfinite(x) || x == 0.0) {
    return x;
  }
  int exp2 = 0;
  std::frexp(x, &exp2);  // |x| in [2^(exp2-1), 2^exp2)
  const int e = exp2 - 1;
  // 10 explicit mantissa bits above the subnormal floor of 2^-24.
  const int quantum_exp = e < -14 ? -24 : e - 10;
  const double scaled = std::ldexp(x, -quantum_exp);
  // nearbyint honors the default round-to-nearest-even mode.
  const double rounded = std::ldexp(std::nearbyint(scaled), quantum_exp);
  if (std::fabs(rounded) > kHalfMax) {
    return std::copysign(std::numeric_limits<double>::infinity(), x);
  }
  return rounded;
}

inline bool is_half_exact(double x) {
  return std::isnan(x) || round_to_half(x) == x;
}

}  // namespace lomo
