#include "stochtransport/kernel.hpp"

#include <cmath>
#include <limits>
#include <sstream>

// pchip.hpp calls isnan unqualified; make the global overloads visible.
#include <math.h>

#include <boost/math/interpolators/pchip.hpp>

#include "stochtransport/errors.hpp"
#include "stochtransport/quadrature.hpp"

namespace stochtransport {

struct KernelSpec::Interpolant {
    boost::math::interpolators::pchip<std::vector<double>> spline;
    double t_max;
};

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

// Near the origin both integrals are summed from the (entire, alternating)
// expansion of e^{-lambda u}:
//   int_0^t (t-u) u^{2H-2} e^{-lambda u} du = sum_n (-lambda)^n/n! t^{2H+n} / ((2H-1+n)(2H+n)),
//   int_0^t u^{2H-2} e^{-lambda u} du       = sum_n (-lambda)^n/n! t^{2H-1+n} / (2H-1+n).
// For lambda t <= 2 the terms fall below 1e-17 of the sum within 30 terms.
constexpr double kSeriesLimit = 2.0;

double damped_series(const DampedFractional& d, double t, bool density) {
    const double a = 2.0 * d.hurst - 1.0;
    const double x = d.lambda * t;
    double term = 1.0;  // (-lambda t)^n / n!
    double sum = 0.0;
    for (int n = 0; n < 60; ++n) {
        const double c = density ? term / (a + n) : term / ((a + n) * (a + 1.0 + n));
        sum += c;
        if (n > 2 && std::abs(c) < 1e-18 * std::abs(sum)) break;
        term *= -x / (n + 1);
    }
    return 2.0 * d.alpha * sum * std::pow(t, density ? a : a + 1.0);
}

// Beyond the series range: substituting u = w^p with p = 1/(2H-1) turns
// u^{2H-2} du into p dw, removing the weak endpoint singularity before
// adaptive quadrature.
double damped_gamma(const DampedFractional& d, double t) {
    if (t == 0.0) return 0.0;
    if (d.lambda * t <= kSeriesLimit) return damped_series(d, t, false);
    const double p = 1.0 / (2.0 * d.hurst - 1.0);
    const double upper = std::pow(t, 2.0 * d.hurst - 1.0);
    auto f = [&](double w) {
        const double u = std::pow(w, p);
        return p * (t - u) * std::exp(-d.lambda * u);
    };
    return 2.0 * d.alpha * quad::integrate(f, 0.0, upper, {}, 1e-13, 18);
}

double damped_dgamma(const DampedFractional& d, double t) {
    if (d.lambda * t <= kSeriesLimit) return damped_series(d, t, true);
    const double p = 1.0 / (2.0 * d.hurst - 1.0);
    const double upper = std::pow(t, 2.0 * d.hurst - 1.0);
    auto f = [&](double w) { return p * std::exp(-d.lambda * std::pow(w, p)); };
    return 2.0 * d.alpha * quad::integrate(f, 0.0, upper, {}, 1e-13, 18);
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw DomainError(msg);
}

}  // namespace

KernelSpec::KernelSpec(KernelVariant v)
    : variant_(std::make_shared<const KernelVariant>(std::move(v))) {}

KernelSpec KernelSpec::brownian() { return KernelSpec(Brownian{}); }

KernelSpec KernelSpec::fbm(double hurst) {
    require(hurst > 0.0 && hurst < 1.0, "FBM requires 0 < H < 1");
    return KernelSpec(Fractional{hurst});
}

KernelSpec KernelSpec::damped_fbm(double hurst, double lambda, double alpha) {
    require(hurst > 0.5 && hurst < 1.0, "damped FBM requires 1/2 < H < 1");
    require(lambda > 0.0, "damped FBM requires lambda > 0");
    require(alpha > 0.0, "damped FBM requires alpha > 0");
    return KernelSpec(DampedFractional{hurst, lambda, alpha});
}

KernelSpec KernelSpec::tabulated(std::vector<double> grid, std::vector<double> values) {
    require(grid.size() >= 4, "tabulated gamma needs at least 4 points");
    require(grid.size() == values.size(), "tabulated gamma: grid/values size mismatch");
    require(grid.front() == 0.0 && values.front() == 0.0,
            "tabulated gamma must start at t = 0 with gamma(0) = 0");
    for (std::size_t i = 1; i < grid.size(); ++i)
        require(grid[i] > grid[i - 1], "tabulated gamma grid must be strictly increasing");
    KernelSpec k(TabulatedGamma{grid, values});
    const double t_max = grid.back();
    k.interp_ = std::make_shared<const Interpolant>(
        Interpolant{boost::math::interpolators::pchip<std::vector<double>>(std::move(grid),
                                                                          std::move(values)),
                    t_max});
    return k;
}

std::string KernelSpec::describe() const {
    std::ostringstream os;
    std::visit(overloaded{
                   [&](const Brownian&) { os << "BM"; },
                   [&](const Fractional& f) { os << "FBM(H=" << f.hurst << ")"; },
                   [&](const DampedFractional& d) {
                       os << "DampedFBM(H=" << d.hurst << ",lambda=" << d.lambda
                          << ",alpha=" << d.alpha << ")";
                   },
                   [&](const TabulatedGamma& t) {
                       os << "Tabulated(" << t.grid.size() << " points)";
                   },
               },
               variant());
    return os.str();
}

double gamma(const KernelSpec& k, double t) {
    if (t < 0.0) throw DomainError("gamma: negative time");
    return std::visit(overloaded{
                          [&](const Brownian&) { return t; },
                          [&](const Fractional& f) { return std::pow(t, 2.0 * f.hurst); },
                          [&](const DampedFractional& d) { return damped_gamma(d, t); },
                          [&](const TabulatedGamma&) {
                              const auto* in = k.interpolant();
                              if (t > in->t_max)
                                  throw RangeError("gamma: t beyond tabulated range");
                              return in->spline(t);
                          },
                      },
                      k.variant());
}

double dgamma(const KernelSpec& k, double t) {
    if (t < 0.0) throw DomainError("dgamma: negative time");
    return std::visit(
        overloaded{
            [&](const Brownian&) { return 1.0; },
            [&](const Fractional& f) {
                if (t == 0.0) {
                    if (f.hurst < 0.5) return std::numeric_limits<double>::infinity();
                    return f.hurst == 0.5 ? 1.0 : 0.0;
                }
                return 2.0 * f.hurst * std::pow(t, 2.0 * f.hurst - 1.0);
            },
            [&](const DampedFractional& d) { return t == 0.0 ? 0.0 : damped_dgamma(d, t); },
            [&](const TabulatedGamma&) {
                const auto* in = k.interpolant();
                if (t > in->t_max) throw RangeError("dgamma: t beyond tabulated range");
                return in->spline.prime(t);
            },
        },
        k.variant());
}

double cov_R(const KernelSpec& k, double t, double s) {
    if (t < 0.0 || s < 0.0) throw DomainError("cov_R: negative time");
    if (t == s) return gamma(k, t);
    return 0.5 * (gamma(k, t) + gamma(k, s) - gamma(k, std::abs(t - s)));
}

double increment_cov(const KernelSpec& k, double a, double b, double c, double d) {
    if (a < 0.0 || c < 0.0) throw DomainError("increment_cov: negative time");
    if (b < a || d < c) throw DomainError("increment_cov: inverted interval");
    return 0.5 * (gamma(k, std::abs(d - a)) + gamma(k, std::abs(c - b)) -
                  gamma(k, std::abs(c - a)) - gamma(k, std::abs(d - b)));
}

RegularityClass classify(const KernelSpec& k, double horizon) {
    if (!(horizon > 0.0)) throw DomainError("classify: horizon must be positive");
    return std::visit(
        overloaded{
            [](const Brownian&) {
                return RegularityClass{Regularity::regular, "constant density 1"};
            },
            [](const Fractional& f) {
                if (f.hurst < 0.5)
                    return RegularityClass{Regularity::singular,
                                           "density 2H t^{2H-1} diverges at t = 0"};
                return RegularityClass{Regularity::regular,
                                       "density 2H t^{2H-1} bounded on the horizon"};
            },
            [](const DampedFractional&) {
                return RegularityClass{Regularity::regular,
                                       "density increasing to a finite plateau"};
            },
            [&](const TabulatedGamma& tab) {
                if (horizon > tab.grid.back())
                    return RegularityClass{Regularity::singular,
                                           "table does not cover the horizon"};
                for (std::size_t i = 1; i < tab.values.size(); ++i)
                    if (tab.values[i] < tab.values[i - 1])
                        return RegularityClass{Regularity::singular,
                                               "gamma decreases: density has a negative part"};
                return RegularityClass{Regularity::regular,
                                       "nondecreasing table, monotone cubic density"};
            },
        },
        k.variant());
}

double damped_density_plateau(const DampedFractional& d) {
    const double a = 2.0 * d.hurst - 1.0;
    return 2.0 * d.alpha * std::tgamma(a) * std::pow(d.lambda, -a);
}

}  // namespace stochtransport
