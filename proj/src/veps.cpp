#include "stochtransport/veps.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "stochtransport/errors.hpp"
#include "stochtransport/quadrature.hpp"

namespace stochtransport {

namespace {

// Points in (0, t) where the s-integrand of veps_dot is not smooth.
std::vector<double> inner_breaks(double epsilon, double t) {
    std::vector<double> out;
    for (double b : {epsilon, t - 2.0 * epsilon, t - epsilon, 2.0 * epsilon})
        if (b > 0.0 && b < t) out.push_back(b);
    return out;
}

}  // namespace

double veps_dot(const KernelSpec& k, double epsilon, double t) {
    if (!(epsilon > 0.0)) throw DomainError("veps_dot: epsilon must be positive");
    if (t < 0.0) throw DomainError("veps_dot: negative time");
    if (t == 0.0) return 0.0;
    const double a = std::max(t - epsilon, 0.0);
    const double b = t + epsilon;
    auto f = [&](double s) {
        return increment_cov(k, a, b, std::max(s - epsilon, 0.0), s + epsilon);
    };
    const double scale = 1.0 / (4.0 * epsilon * epsilon);
    return scale * quad::integrate(f, 0.0, t, inner_breaks(epsilon, t));
}

VepsCurve veps_cumulative(const KernelSpec& k, double epsilon, const std::vector<double>& t_grid) {
    if (t_grid.empty() || t_grid.front() != 0.0)
        throw DomainError("veps_cumulative: grid must start at 0");
    for (std::size_t i = 1; i < t_grid.size(); ++i)
        if (!(t_grid[i] > t_grid[i - 1]))
            throw DomainError("veps_cumulative: grid must be strictly increasing");

    VepsCurve c;
    c.epsilon = epsilon;
    c.kernel = k;
    c.t_grid = t_grid;
    c.vdot.resize(t_grid.size());
    c.v.assign(t_grid.size(), 0.0);
    auto f = [&](double t) { return veps_dot(k, epsilon, t); };
    for (std::size_t i = 0; i < t_grid.size(); ++i) {
        c.vdot[i] = f(t_grid[i]);
        if (i == 0) continue;
        std::vector<double> br;
        for (double kink : {epsilon, 2.0 * epsilon}) br.push_back(kink);
        c.v[i] = c.v[i - 1] + quad::integrate(f, t_grid[i - 1], t_grid[i], br, 1e-11, 12);
    }
    return c;
}

double VepsCurve::sup_residual(double t_lo, double t_hi) const {
    double sup = 0.0;
    for (std::size_t i = 0; i < t_grid.size(); ++i)
        if (t_grid[i] >= t_lo - 1e-12 && t_grid[i] <= t_hi + 1e-12)
            sup = std::max(sup, std::abs(v[i] - 0.5 * gamma(kernel, t_grid[i])));
    return sup;
}

double weak_star_residual(const VepsCurve& curve, std::span<const double> phi) {
    if (phi.size() != curve.t_grid.size())
        throw DomainError("weak_star_residual: phi must be sampled on the curve grid");
    double int_v = 0.0, int_g = 0.0;
    double g_prev = 0.0;
    for (std::size_t i = 1; i < phi.size(); ++i) {
        const double pm = 0.5 * (phi[i] + phi[i - 1]);
        const double g = gamma(curve.kernel, curve.t_grid[i]);
        int_v += pm * (curve.v[i] - curve.v[i - 1]);
        int_g += pm * (g - g_prev);
        g_prev = g;
    }
    return std::abs(int_v - 0.5 * int_g);
}

double weak_star_residual(const KernelSpec& k, double epsilon, const std::vector<double>& t_grid,
                          std::span<const double> phi) {
    return weak_star_residual(veps_cumulative(k, epsilon, t_grid), phi);
}

std::string veps_csv(const VepsCurve& curve) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "t,vdot,v,gamma_half,residual\n";
    for (std::size_t i = 0; i < curve.t_grid.size(); ++i) {
        const double gh = 0.5 * gamma(curve.kernel, curve.t_grid[i]);
        os << curve.t_grid[i] << ',' << curve.vdot[i] << ',' << curve.v[i] << ',' << gh << ','
           << std::abs(curve.v[i] - gh) << '\n';
    }
    return os.str();
}

}  // namespace stochtransport
