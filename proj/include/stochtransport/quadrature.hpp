#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace stochtransport::quad {

namespace detail {

struct Piece {
    double value, error, l1;
};

// One 7/15-point Gauss-Kronrod evaluation with error |K - G|.
template <class F>
Piece kronrod15(F& f, double a, double b) {
    using GK = boost::math::quadrature::gauss_kronrod<double, 15>;
    using G = boost::math::quadrature::gauss<double, 7>;
    static const auto& x = GK::abscissa();
    static const auto& wk = GK::weights();
    static const auto& wg = G::weights();
    const double c = 0.5 * (a + b), h = 0.5 * (b - a);
    double fc = f(c);
    double k = wk[0] * fc, g = wg[0] * fc, l1 = wk[0] * std::abs(fc);
    for (std::size_t i = 1; i < x.size(); ++i) {
        const double fp = f(c + h * x[i]), fm = f(c - h * x[i]);
        k += wk[i] * (fp + fm);
        l1 += wk[i] * (std::abs(fp) + std::abs(fm));
        if (i % 2 == 0) g += wg[i / 2] * (fp + fm);
    }
    return {k * h, std::abs((k - g) * h), l1 * std::abs(h)};
}

template <class F>
double adapt(F& f, double a, double b, double rel_tol, double abs_density, unsigned depth) {
    const Piece p = kronrod15(f, a, b);
    const double floor = 50.0 * std::numeric_limits<double>::epsilon() * p.l1;
    if (depth == 0 || p.error <= std::max({rel_tol * p.l1, abs_density * (b - a), floor}))
        return p.value;
    const double m = 0.5 * (a + b);
    return adapt(f, a, m, rel_tol, abs_density, depth - 1) + adapt(f, m, b, rel_tol, abs_density, depth - 1);
}

}  // namespace detail

/// Adaptive 7/15-point Gauss-Kronrod on [a, b], split at the given interior
/// breakpoints (kinks of the integrand). A piece is accepted once its error
/// estimate is below rel_tol times its L1 norm, or below abs_tol spread
/// uniformly over [a, b]; the absolute floor stops futile refinement where
/// the integrand is pure rounding noise.
template <class F>
double integrate(F&& f, double a, double b, std::vector<double> breaks = {},
                 double rel_tol = 1e-12, unsigned max_depth = 30, double abs_tol = 1e-15) {
    if (!(b > a)) return 0.0;
    breaks.push_back(a);
    breaks.push_back(b);
    std::sort(breaks.begin(), breaks.end());
    const double density = abs_tol / (b - a);
    double total = 0.0;
    double lo = a;
    for (double x : breaks) {
        if (x <= lo || x > b) continue;
        total += detail::adapt(f, lo, x, rel_tol, density, max_depth);
        lo = x;
    }
    return total;
}

}  // namespace stochtransport::quad
