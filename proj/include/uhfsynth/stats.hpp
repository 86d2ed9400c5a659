#pragma once

// Special functions for the significance test: regularized incomplete beta
// via Lentz's continued fraction, and the Student t CDF built on it.

#include <cmath>

#include "uhfsynth/common.hpp"

namespace uhfsynth {

namespace detail {

inline real incomplete_beta_cf(real a, real b, real x) {
    constexpr real tiny = 1e-30;
    constexpr real eps = 3e-15;
    real c = 1.0;
    real d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::fabs(d) < tiny) d = tiny;
    d = 1.0 / d;
    real h = d;
    for (int m = 1; m <= 400; ++m) {
        const real m2 = 2.0 * m;
        real aa = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + aa * d;
        if (std::fabs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const real del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) return h;
    }
    return h; // converged enough for the df range used here
}

} // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline real reg_incomplete_beta(real a, real b, real x) {
    check(a > 0 && b > 0, "reg_incomplete_beta: a, b must be positive, got ", a, ", ", b);
    check(x >= 0.0 && x <= 1.0, "reg_incomplete_beta: x must lie in [0,1], got ", x);
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const real ln_front = a * std::log(x) + b * std::log1p(-x) -
                          (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
    if (x < (a + 1.0) / (a + b + 2.0))
        return std::exp(ln_front) * detail::incomplete_beta_cf(a, b, x) / a;
    return 1.0 - std::exp(ln_front) * detail::incomplete_beta_cf(b, a, 1.0 - x) / b;
}

/// CDF of Student's t distribution with `df` degrees of freedom.
inline real student_t_cdf(real t, real df) {
    check(df > 0, "student_t_cdf: df must be positive, got ", df);
    if (t == 0.0) return 0.5;
    const real x = df / (df + t * t);
    const real tail = 0.5 * reg_incomplete_beta(0.5 * df, 0.5, x);
    return t > 0 ? 1.0 - tail : tail;
}

/// Density of Student's t distribution (used by integration cross-checks).
inline real student_t_pdf(real x, real df) {
    check(df > 0, "student_t_pdf: df must be positive, got ", df);
    const real ln = std::lgamma(0.5 * (df + 1.0)) - std::lgamma(0.5 * df) -
                    0.5 * std::log(df * M_PI) -
                    0.5 * (df + 1.0) * std::log1p(x * x / df);
    return std::exp(ln);
}

} // namespace uhfsynth
