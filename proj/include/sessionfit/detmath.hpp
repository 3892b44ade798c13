#pragma once

// Elementary functions evaluated with plain IEEE-754 double arithmetic only
// (+, -, *, /, sqrt and exact exponent manipulation). Unlike libm these give
// bit-identical results on every platform, which the corpus digest and the
// byte-identical checkpoint/results guarantees rely on. Accuracy is around
// 1e-13 relative, far beyond what the float32 pipeline can observe.

#include <cmath>
#include <cstdint>
#include <limits>

namespace sessionfit {
namespace detail {

inline constexpr double kLn2Hi = 6.93147180369123816490e-01;
inline constexpr double kLn2Lo = 1.90821492927058770002e-10;
inline constexpr double kInvLn2 = 1.44269504088896338700e+00;
inline constexpr double kTwoPi = 6.283185307179586476925286766559;
inline constexpr double kInvTwoPi = 0.15915494309189533576888376337251;
inline constexpr double kHalfPi = 1.5707963267948966192313216916398;

// sin on [0, pi/2), Taylor series.
inline double sin_kernel(double t) {
  const double t2 = t * t;
  double s = 1.0 / 355687428096000.0;  // 1/17!
  s = s * t2 - 1.0 / 1307674368000.0;  // 1/15!
  s = s * t2 + 1.0 / 6227020800.0;     // 1/13!
  s = s * t2 - 1.0 / 39916800.0;       // 1/11!
  s = s * t2 + 1.0 / 362880.0;         // 1/9!
  s = s * t2 - 1.0 / 5040.0;           // 1/7!
  s = s * t2 + 1.0 / 120.0;            // 1/5!
  s = s * t2 - 1.0 / 6.0;              // 1/3!
  s = s * t2 + 1.0;
  return s * t;
}

// cos on [0, pi/2), Taylor series.
inline double cos_kernel(double t) {
  const double t2 = t * t;
  double s = 1.0 / 20922789888000.0;  // 1/16!
  s = s * t2 - 1.0 / 87178291200.0;   // 1/14!
  s = s * t2 + 1.0 / 479001600.0;     // 1/12!
  s = s * t2 - 1.0 / 3628800.0;       // 1/10!
  s = s * t2 + 1.0 / 40320.0;         // 1/8!
  s = s * t2 - 1.0 / 720.0;           // 1/6!
  s = s * t2 + 1.0 / 24.0;            // 1/4!
  s = s * t2 - 1.0 / 2.0;
  return s * t2 + 1.0;
}

}  // namespace detail

// exp(x) via base-2 range reduction and a degree-13 Taylor polynomial.
inline double det_exp(double x) {
  if (x != x) return x;
  if (x > 709.0) return std::numeric_limits<double>::infinity();
  if (x < -745.0) return 0.0;
  const double n = std::floor(x * detail::kInvLn2 + 0.5);
  const double r = (x - n * detail::kLn2Hi) - n * detail::kLn2Lo;
  double s = 1.0 / 6227020800.0;  // 1/13!
  s = s * r + 1.0 / 479001600.0;
  s = s * r + 1.0 / 39916800.0;
  s = s * r + 1.0 / 3628800.0;
  s = s * r + 1.0 / 362880.0;
  s = s * r + 1.0 / 40320.0;
  s = s * r + 1.0 / 5040.0;
  s = s * r + 1.0 / 720.0;
  s = s * r + 1.0 / 120.0;
  s = s * r + 1.0 / 24.0;
  s = s * r + 1.0 / 6.0;
  s = s * r + 1.0 / 2.0;
  s = s * r + 1.0;
  s = s * r + 1.0;
  return std::ldexp(s, static_cast<int>(n));
}

// log(x) via atanh series on the mantissa, x must be positive and finite.
inline double det_log(double x) {
  if (x != x) return x;
  if (x <= 0.0) {
    return x == 0.0 ? -std::numeric_limits<double>::infinity()
                    : std::numeric_limits<double>::quiet_NaN();
  }
  int e = 0;
  double m = std::frexp(x, &e);  // m in [0.5, 1)
  if (m < 0.70710678118654752440) {
    m *= 2.0;
    e -= 1;
  }
  const double t = (m - 1.0) / (m + 1.0);
  const double t2 = t * t;
  double s = 1.0 / 21.0;
  s = s * t2 + 1.0 / 19.0;
  s = s * t2 + 1.0 / 17.0;
  s = s * t2 + 1.0 / 15.0;
  s = s * t2 + 1.0 / 13.0;
  s = s * t2 + 1.0 / 11.0;
  s = s * t2 + 1.0 / 9.0;
  s = s * t2 + 1.0 / 7.0;
  s = s * t2 + 1.0 / 5.0;
  s = s * t2 + 1.0 / 3.0;
  s = s * t2 + 1.0;
  const double lm = 2.0 * t * s;
  const double ed = static_cast<double>(e);
  return ed * detail::kLn2Hi + (lm + ed * detail::kLn2Lo);
}

// log(1+x) without cancellation near zero.
inline double det_log1p(double x) {
  if (x > -0.25 && x < 0.25) {
    // atanh form: log(1+x) = 2 atanh(x/(2+x))
    const double t = x / (2.0 + x);
    const double t2 = t * t;
    double s = 1.0 / 15.0;
    s = s * t2 + 1.0 / 13.0;
    s = s * t2 + 1.0 / 11.0;
    s = s * t2 + 1.0 / 9.0;
    s = s * t2 + 1.0 / 7.0;
    s = s * t2 + 1.0 / 5.0;
    s = s * t2 + 1.0 / 3.0;
    s = s * t2 + 1.0;
    return 2.0 * t * s;
  }
  return det_log(1.0 + x);
}

inline double det_sin(double x) {
  const double u = x * detail::kInvTwoPi;
  const double frac = u - std::floor(u);  // [0,1)
  const double q4 = frac * 4.0;
  const int q = static_cast<int>(q4);  // quadrant 0..3
  const double t = (q4 - static_cast<double>(q)) * detail::kHalfPi;
  switch (q) {
    case 0: return detail::sin_kernel(t);
    case 1: return detail::cos_kernel(t);
    case 2: return -detail::sin_kernel(t);
    default: return -detail::cos_kernel(t);
  }
}

inline double det_cos(double x) {
  const double u = x * detail::kInvTwoPi;
  const double frac = u - std::floor(u);
  const double q4 = frac * 4.0;
  const int q = static_cast<int>(q4);
  const double t = (q4 - static_cast<double>(q)) * detail::kHalfPi;
  switch (q) {
    case 0: return detail::cos_kernel(t);
    case 1: return -detail::sin_kernel(t);
    case 2: return -detail::cos_kernel(t);
    default: return detail::sin_kernel(t);
  }
}

// base^n by binary exponentiation; used for Adam bias correction terms.
inline double pow_int(double base, std::uint64_t n) {
  double result = 1.0;
  double b = base;
  while (n != 0) {
    if (n & 1u) result *= b;
    b *= b;
    n >>= 1;
  }
  return result;
}

}  // namespace sessionfit
