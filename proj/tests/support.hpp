#pragma once
// Shared helpers for the test suites: independent closed-form oracles that do
// not go through the library's own formulas.

#include <algorithm>
#include <cmath>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

namespace testsupport {

inline double fbm_gamma(double h, double t) { return std::pow(std::abs(t), 2.0 * h); }

/// Damped kernel through the lower incomplete gamma function:
/// gamma(t) = 2 alpha [t lambda^{1-2H} g(2H-1, lambda t) - lambda^{-2H} g(2H, lambda t)].
inline double damped_gamma(double h, double lambda, double alpha, double t) {
    if (t == 0.0) return 0.0;
    using boost::math::tgamma_lower;
    return 2.0 * alpha *
           (t * std::pow(lambda, 1.0 - 2.0 * h) * tgamma_lower(2.0 * h - 1.0, lambda * t) -
            std::pow(lambda, -2.0 * h) * tgamma_lower(2.0 * h, lambda * t));
}

inline double damped_dgamma(double h, double lambda, double alpha, double t) {
    return 2.0 * alpha * std::pow(lambda, 1.0 - 2.0 * h) *
           boost::math::tgamma_lower(2.0 * h - 1.0, lambda * t);
}

/// Second antiderivative of |x|^{2H}, vanishing with its derivative at 0.
inline double fbm_phi(double h, double x) {
    return std::pow(std::abs(x), 2.0 * h + 2.0) / ((2.0 * h + 1.0) * (2.0 * h + 2.0));
}

inline double fbm_primitive(double h, double a, double b) {
    return (std::pow(b, 2.0 * h + 1.0) - std::pow(a, 2.0 * h + 1.0)) / (2.0 * h + 1.0);
}

/// Cov(int_a^b G, int_c^d G) for FBM, from Cov(G_r, G_u) = (|r|^2H + |u|^2H - |r-u|^2H) / 2.
inline double fbm_integral_cov(double h, double a, double b, double c, double d) {
    const double cross = fbm_phi(h, b - c) - fbm_phi(h, a - c) - fbm_phi(h, b - d) + fbm_phi(h, a - d);
    // cross = int_a^b int_c^d |r-u|^2H du dr
    return 0.5 * ((d - c) * fbm_primitive(h, a, b) + (b - a) * fbm_primitive(h, c, d) - cross);
}

/// Var of the eps-regularised drive at t for FBM, written as
/// (1/2eps)(int_eps^{t+eps} G - int_0^{(t-eps)+} G); Var = 2 V_eps(t).
inline double fbm_regularized_variance(double h, double eps, double t) {
    const double a0 = eps, b0 = t + eps, a1 = 0.0, b1 = std::max(t - eps, 0.0);
    const double v = fbm_integral_cov(h, a0, b0, a0, b0) - 2.0 * fbm_integral_cov(h, a0, b0, a1, b1) +
                     fbm_integral_cov(h, a1, b1, a1, b1);
    return v / (4.0 * eps * eps);
}

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
inline double min_eigenvalue(std::vector<std::vector<double>> a) {
    const std::size_t n = a.size();
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a[p][q] == 0.0) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
    }
    double m = a[0][0];
    for (std::size_t i = 1; i < n; ++i) m = std::min(m, a[i][i]);
    return m;
}

}  // namespace testsupport
