#include "stochtransport/moments.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "stochtransport/errors.hpp"

namespace stochtransport {
namespace {

void require_regular(const KernelSpec& k, double horizon, const char* who) {
    const auto cls = classify(k, horizon);
    if (!cls.is_regular())
        throw DomainError(std::string(who) + ": refusing singular kernel (" + cls.reason + ")");
}

void require_grid(const std::vector<double>& t, const char* who) {
    if (t.empty() || t.front() != 0.0)
        throw DomainError(std::string(who) + ": time grid must start at 0");
    for (std::size_t i = 1; i < t.size(); ++i)
        if (!(t[i] > t[i - 1])) throw DomainError(std::string(who) + ": time grid must increase");
}

// One classical RK4 step of y' = f(t, y).
template <class F>
Complex rk4_step(const F& f, double t, double h, Complex y) {
    const Complex k1 = f(t, y);
    const Complex k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
    const Complex k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
    const Complex k4 = f(t + h, y + h * k3);
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}


Complex theta0_at(const SpectralProblem& p, const Vec2& nu) { return p.theta0.transform_at_frequency(nu); }

}  // namespace

EllipticOperatorSpec EllipticOperatorSpec::from(const SpectralProblem& p) { return {p.q_matrix()}; }

bool EllipticOperatorSpec::positive_semidefinite() const {
    const double tr = q[0] + q[3];
    const double det = q[0] * q[3] - q[1] * q[2];
    const double scale = std::max(1.0, std::abs(tr));
    return std::abs(q[1] - q[2]) <= 1e-14 * scale && tr >= -1e-14 * scale && det >= -1e-14 * scale * scale;
}

Complex mean_closed(const SpectralProblem& p, const KernelSpec& k, double t, const Vec2& xi) {
    return p.theta0_hat(xi) * std::exp(-p.kappa * norm2(xi) * t - 0.5 * p.sigma2(xi) * gamma(k, t));
}

MeanSolution mean_closed(const SpectralProblem& p, const KernelSpec& k,
                         const std::vector<double>& times, const Vec2& xi) {
    MeanSolution s;
    s.xi = xi;
    s.times = times;
    s.values.reserve(times.size());
    for (double t : times) s.values.push_back(mean_closed(p, k, t, xi));
    return s;
}

MeanOdeResult mean_ode(const SpectralProblem& p, const VepsCurve& curve, const Vec2& xi) {
    const auto& t = curve.t_grid;
    require_grid(t, "mean_ode");
    if (curve.v.size() != t.size() || curve.vdot.size() != t.size())
        throw DomainError("mean_ode: curve arrays do not match its grid");
    require_regular(curve.kernel, t.back(), "mean_ode");

    const double k2 = p.kappa * norm2(xi);
    const double s2 = p.sigma2(xi);
    const Complex e0 = p.theta0_hat(xi);

    MeanOdeResult r;
    for (auto* s : {&r.rk4, &r.exponential}) {
        s->xi = xi;
        s->times = t;
        s->provenance = Provenance::ode_quadrature;
        s->epsilon = curve.epsilon;
        s->values.resize(t.size());
    }
    r.rk4.values[0] = e0;
    const double eps = curve.epsilon;
    const double kinks[] = {eps, 2.0 * eps};
    auto rhs = [&](double vd, Complex y) { return (-k2 - s2 * vd) * y; };
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
        const double h = t[i + 1] - t[i];
        bool near = false;
        for (double q : kinks) near = near || (q > t[i] - 3.0 * h && q < t[i + 1] + 3.0 * h);
        if (!near) {
            // Smooth cell: reuse the curve's nodes, one fresh midpoint value.
            const double vm = veps_dot(curve.kernel, eps, t[i] + 0.5 * h);
            const double vd0 = curve.vdot[i], vd1 = curve.vdot[i + 1];
            const Complex y = r.rk4.values[i];
            const Complex k1 = rhs(vd0, y);
            const Complex k2s = rhs(vm, y + 0.5 * h * k1);
            const Complex k3 = rhs(vm, y + 0.5 * h * k2s);
            const Complex k4 = rhs(vd1, y + h * k3);
            r.rk4.values[i + 1] = y + h / 6.0 * (k1 + 2.0 * k2s + 2.0 * k3 + k4);
            continue;
        }
        // V-dot loses smoothness at eps and 2 eps: split there and substep.
        std::vector<double> pts{t[i], t[i + 1]};
        for (double q : kinks)
            if (q > t[i] && q < t[i + 1]) pts.push_back(q);
        std::sort(pts.begin(), pts.end());
        Complex y = r.rk4.values[i];
        for (std::size_t j = 0; j + 1 < pts.size(); ++j) {
            constexpr int m = 16;
            const double hh = (pts[j + 1] - pts[j]) / m;
            for (int q = 0; q < m; ++q) {
                const double a = pts[j] + q * hh;
                auto f = [&](double s, Complex z) { return rhs(veps_dot(curve.kernel, eps, s), z); };
                y = rk4_step(f, a, hh, y);
            }
        }
        r.rk4.values[i + 1] = y;
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
        r.exponential.values[i] = e0 * std::exp(-k2 * t[i] - s2 * curve.v[i]);
        r.max_disagreement = std::max(r.max_disagreement, std::abs(r.exponential.values[i] - r.rk4.values[i]));
    }
    return r;
}

MeanOdeResult mean_ode(const SpectralProblem& p, const KernelSpec& k, double epsilon,
                       const std::vector<double>& t_grid, const Vec2& xi) {
    require_grid(t_grid, "mean_ode");
    require_regular(k, t_grid.back(), "mean_ode");
    return mean_ode(p, veps_cumulative(k, epsilon, t_grid), xi);
}

Complex cov_closed(const SpectralProblem& p, const KernelSpec& k, double t, const Vec2& xi,
                   const Vec2& eta) {
    const double g = gamma(k, t);
    const Vec2 d{xi[0] - eta[0], xi[1] - eta[1]};
    const double heat = std::exp(-p.kappa * (norm2(xi) + norm2(eta)) * t);
    const double bracket =
        std::exp(-0.5 * p.sigma2(d) * g) - std::exp(-0.5 * (p.sigma2(xi) + p.sigma2(eta)) * g);
    return p.theta0_hat(xi) * std::conj(p.theta0_hat(eta)) * heat * bracket;
}

CovarianceSolution cov_ode(const SpectralProblem& p, const KernelSpec& k,
                           const std::vector<double>& t_grid, const Vec2& xi, const Vec2& eta) {
    require_grid(t_grid, "cov_ode");
    require_regular(k, t_grid.back(), "cov_ode");

    const Vec2 d{xi[0] - eta[0], xi[1] - eta[1]};
    const double k2 = p.kappa * (norm2(xi) + norm2(eta));
    const double s2d = p.sigma2(d);
    const double rho = p.rho(xi, eta);

    // Source uses the closed-form means so the two error sources stay apart.
    auto f = [&](double s, Complex c) {
        const double dg = dgamma(k, s);
        const Complex src = rho * mean_closed(p, k, s, xi) * std::conj(mean_closed(p, k, s, eta));
        return (-k2 - 0.5 * s2d * dg) * c + src * dg;
    };

    CovarianceSolution sol;
    sol.xi = xi;
    sol.eta = eta;
    sol.rho = rho;
    sol.times = t_grid;
    sol.provenance = Provenance::ode_quadrature;
    sol.values.assign(t_grid.size(), Complex{0.0, 0.0});
    if (t_grid.size() < 2) return sol;

    // gamma' may behave like t^{2H-1} at the origin, which costs RK4 its
    // order on the first cell. Integrate that cell on a dyadic grid that
    // resolves the power law; the part below t_1 2^-50 is negligible.
    const double t1 = t_grid[1];
    Complex c{0.0, 0.0};
    for (int j = 50; j >= 1; --j) {
        const double a = std::ldexp(t1, -j);
        const double h = 0.5 * a;
        c = rk4_step(f, a, h, c);
        c = rk4_step(f, a + h, h, c);
    }
    sol.values[1] = c;
    // The following cells still see the power law on scales comparable to
    // their width; split them until h / t <= 1/32.
    for (std::size_t i = 1; i + 1 < t_grid.size(); ++i) {
        const double h = t_grid[i + 1] - t_grid[i];
        const int m = std::clamp(static_cast<int>(std::ceil(32.0 * h / t_grid[i])), 1, 32);
        Complex y = sol.values[i];
        for (int q = 0; q < m; ++q) y = rk4_step(f, t_grid[i] + q * h / m, h / m, y);
        sol.values[i + 1] = y;
    }
    return sol;
}

PhysicalField mean_physical(const SpectralProblem& p, const KernelSpec& k, double t) {
    const auto& L = p.lattice;
    const double g = gamma(k, t);
    std::vector<Complex> modes(L.size());
    for (int i = 0; i < L.n; ++i)
        for (int j = 0; j < L.n; ++j) {
            const Vec2 nu = L.frequency(i, j);
            const Vec2 xi = wavevector(nu);
            modes[static_cast<std::size_t>(i) * L.n + j] =
                theta0_at(p, nu) * std::exp(-p.kappa * norm2(xi) * t - 0.5 * p.sigma2(xi) * g);
        }
    return reconstruct(L, modes);
}

double mean_pde_residual(const SpectralProblem& p, const KernelSpec& k, double t) {
    constexpr double h = 1e-4;
    if (!(t > 2.0 * h)) throw DomainError("mean_pde_residual: need t > 2e-4");
    double g[5];
    for (int m = 0; m < 5; ++m) g[m] = gamma(k, t + (m - 2) * h);
    const double dg = dgamma(k, t);
    const auto& L = p.lattice;
    double worst = 0.0;
    for (int i = 0; i < L.n; ++i)
        for (int j = 0; j < L.n; ++j) {
            const Vec2 nu = L.frequency(i, j);
            const Vec2 xi = wavevector(nu);
            const Complex th = theta0_at(p, nu);
            const double a = p.kappa * norm2(xi);
            const double s2 = p.sigma2(xi);
            Complex e[5];
            for (int m = 0; m < 5; ++m) e[m] = th * std::exp(-a * (t + (m - 2) * h) - 0.5 * s2 * g[m]);
            const Complex dt_e = (e[0] - 8.0 * e[1] + 8.0 * e[3] - e[4]) / (12.0 * h);
            const Complex rhs = (-a - 0.5 * s2 * dg) * e[2];
            worst = std::max(worst, std::abs(dt_e - rhs));
        }
    return worst;
}

int PairLattice::half() const {
    const long h = std::lround(xi_max / dnu);
    if (h < 1 || std::abs(h * dnu - xi_max) > 1e-9 * xi_max)
        throw DomainError("pair lattice: xi_max / dnu must be a positive integer");
    return static_cast<int>(h);
}

namespace {

// Per-point amplitudes on the reduced lattice at time t:
// a = theta0^ e^{-kappa|xi|^2 t}, e = a e^{-sigma^2(xi) gamma / 2}.
struct PairAmplitudes {
    int h = 0;
    int P = 0;
    std::vector<Complex> a, e;
    std::vector<Vec2> xi;
};

PairAmplitudes pair_amplitudes(const SpectralProblem& p, double g, double t, const PairLattice& pl) {
    PairAmplitudes A;
    A.h = pl.half();
    A.P = pl.points_per_axis();
    const std::size_t sz = static_cast<std::size_t>(A.P) * A.P;
    A.a.resize(sz);
    A.e.resize(sz);
    A.xi.resize(sz);
    for (int i = 0; i < A.P; ++i)
        for (int j = 0; j < A.P; ++j) {
            const Vec2 nu{(i - A.h) * pl.dnu, (j - A.h) * pl.dnu};
            const Vec2 xi = wavevector(nu);
            const std::size_t idx = static_cast<std::size_t>(i) * A.P + j;
            A.xi[idx] = xi;
            A.a[idx] = theta0_at(p, nu) * std::exp(-p.kappa * norm2(xi) * t);
            A.e[idx] = A.a[idx] * std::exp(-0.5 * p.sigma2(xi) * g);
        }
    return A;
}

// Visits every pair (mu + D, mu) of the reduced lattice; D indexed on the
// difference lattice of size 4h (the +2h row/column folded onto -2h).
template <class F>
void for_each_pair(const PairAmplitudes& A, F&& f) {
    const int P = A.P;
    const int n = 4 * A.h;
    for (int i1 = 0; i1 < P; ++i1)
        for (int j1 = 0; j1 < P; ++j1)
            for (int i2 = 0; i2 < P; ++i2)
                for (int j2 = 0; j2 < P; ++j2) {
                    const int di = (i1 - i2 + n + n / 2) % n;
                    const int dj = (j1 - j2 + n + n / 2) % n;
                    f(static_cast<std::size_t>(i1) * P + j1, static_cast<std::size_t>(i2) * P + j2,
                      static_cast<std::size_t>(di) * n + dj, i1 - i2, j1 - j2);
                }
}

std::vector<Complex> spectrum_from(const SpectralProblem& p, const PairAmplitudes& A, double g,
                                   const PairLattice& pl) {
    const int n = 4 * A.h;
    std::vector<Complex> aa(static_cast<std::size_t>(n) * n), ee(aa.size());
    for_each_pair(A, [&](std::size_t x, std::size_t y, std::size_t d, int, int) {
        aa[d] += A.a[x] * std::conj(A.a[y]);
        ee[d] += A.e[x] * std::conj(A.e[y]);
    });
    const FrequencyLattice dl = pl.difference_lattice();
    const double w = pl.dnu * pl.dnu;
    std::vector<Complex> out(aa.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * n + j;
            const Vec2 D = wavevector(dl.frequency(i, j));
            out[idx] = w * (std::exp(-0.5 * p.sigma2(D) * g) * aa[idx] - ee[idx]);
        }
    return out;
}

}  // namespace

std::vector<Complex> variance_spectrum(const SpectralProblem& p, const KernelSpec& k, double t,
                                       const PairLattice& pl) {
    const double g = gamma(k, t);
    return spectrum_from(p, pair_amplitudes(p, g, t, pl), g, pl);
}

PhysicalField variance_physical(const SpectralProblem& p, const KernelSpec& k, double t,
                                const PairLattice& pl) {
    const auto spec = variance_spectrum(p, k, t, pl);
    PhysicalField f = reconstruct(pl.difference_lattice(), spec);
    double lowest = 0.0;
    for (double v : f.values) lowest = std::min(lowest, v);
    if (lowest < -1e-9) {
        std::ostringstream os;
        os << "variance_physical: negative variance " << lowest;
        throw NumericalError(os.str());
    }
    return f;
}

double variance_pde_residual(const SpectralProblem& p, const KernelSpec& k, double t,
                             const PairLattice& pl) {
    constexpr double h = 1e-4;
    if (!(t > 2.0 * h)) throw DomainError("variance_pde_residual: need t > 2e-4");
    std::vector<Complex> v[5];
    for (int m = 0; m < 5; ++m) v[m] = variance_spectrum(p, k, t + (m - 2) * h, pl);

    const double g = gamma(k, t);
    const double dg = dgamma(k, t);
    const auto A = pair_amplitudes(p, g, t, pl);
    const int n = 4 * A.h;
    std::vector<Complex> rhs(static_cast<std::size_t>(n) * n);
    const double w = pl.dnu * pl.dnu;
    for_each_pair(A, [&](std::size_t x, std::size_t y, std::size_t d, int di, int dj) {
        const Vec2& xi = A.xi[x];
        const Vec2& eta = A.xi[y];
        const Vec2 D = wavevector({di * pl.dnu, dj * pl.dnu});
        const Complex ee = A.e[x] * std::conj(A.e[y]);
        const Complex c = A.a[x] * std::conj(A.a[y]) * std::exp(-0.5 * p.sigma2(D) * g) - ee;
        rhs[d] += w * ((-p.kappa * (norm2(xi) + norm2(eta)) - 0.5 * p.sigma2(D) * dg) * c +
                       p.rho(xi, eta) * ee * dg);
    });
    double worst = 0.0;
    for (std::size_t i = 0; i < rhs.size(); ++i) {
        const Complex dt_v = (v[0][i] - 8.0 * v[1][i] + 8.0 * v[3][i] - v[4][i]) / (12.0 * h);
        worst = std::max(worst, std::abs(dt_v - rhs[i]));
    }
    return worst;
}

double variance_truncation_bound(const SpectralProblem& p, const PairLattice& pl) {
    // |C(xi, eta)| <= |theta0^(xi)| |theta0^(eta)|, so dropping every pair with
    // a point outside the box costs at most 2 S_total S_tail, where the sums
    // of |theta0^| dnu^2 are taken on the (finer, wider) main lattice.
    const auto& L = p.lattice;
    const double box = pl.half() * pl.dnu;
    double total = 0.0, tail = 0.0;
    for (int i = 0; i < L.n; ++i)
        for (int j = 0; j < L.n; ++j) {
            const Vec2 nu = L.frequency(i, j);
            const double m = std::abs(theta0_at(p, nu)) * L.dnu * L.dnu;
            total += m;
            if (std::abs(nu[0]) > box || std::abs(nu[1]) > box) tail += m;
        }
    return 2.0 * total * tail;
}

SmallTimeExponents smalltime_exponents(const SpectralProblem& p, const KernelSpec& k,
                                       const std::vector<double>& t_sequence) {
    if (p.kappa != 0.0) throw DomainError("smalltime_exponents: requires kappa = 0");
    if (t_sequence.size() < 3) throw DomainError("smalltime_exponents: need at least 3 times");
    const auto& L = p.lattice;
    std::vector<double> amp2(L.size()), s2(L.size());
    for (int i = 0; i < L.n; ++i)
        for (int j = 0; j < L.n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * L.n + j;
            const Vec2 nu = L.frequency(i, j);
            amp2[idx] = std::norm(theta0_at(p, nu)) * L.dnu * L.dnu;
            s2[idx] = p.sigma2(wavevector(nu));
        }
    const std::size_t m = t_sequence.size();
    std::vector<double> x(m), ym(m), ys(m);
    for (std::size_t q = 0; q < m; ++q) {
        const double t = t_sequence[q];
        if (!(t > 0.0)) throw DomainError("smalltime_exponents: times must be positive");
        const double g = gamma(k, t);
        double dm = 0.0, dv = 0.0;
        for (std::size_t idx = 0; idx < amp2.size(); ++idx) {
            const double f = -std::expm1(-0.5 * s2[idx] * g);
            dm += amp2[idx] * f * f;
            dv += amp2[idx] * -std::expm1(-s2[idx] * g);
        }
        x[q] = std::log(t);
        ym[q] = 0.5 * std::log(dm);
        ys[q] = 0.5 * std::log(dv);
    }
    auto fit = [&](const std::vector<double>& y, double& slope, double& se) {
        double mx = 0.0, my = 0.0;
        for (std::size_t q = 0; q < m; ++q) {
            mx += x[q];
            my += y[q];
        }
        mx /= m;
        my /= m;
        double sxx = 0.0, sxy = 0.0;
        for (std::size_t q = 0; q < m; ++q) {
            sxx += (x[q] - mx) * (x[q] - mx);
            sxy += (x[q] - mx) * (y[q] - my);
        }
        slope = sxy / sxx;
        double rss = 0.0;
        for (std::size_t q = 0; q < m; ++q) {
            const double r = y[q] - my - slope * (x[q] - mx);
            rss += r * r;
        }
        se = m > 2 ? std::sqrt(rss / (m - 2) / sxx) : 0.0;
    };
    SmallTimeExponents out;
    fit(ym, out.slope_mean, out.se_mean);
    fit(ys, out.slope_sd, out.se_sd);
    return out;
}

std::string exponent_table_csv(const std::vector<ExponentRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "H,slope_mean,slope_sd,ci\n";
    for (const auto& r : rows)
        os << r.hurst << ',' << r.fit.slope_mean << ',' << r.fit.slope_sd << ','
           << 3.0 * std::max(r.fit.se_mean, r.fit.se_sd) << '\n';
    return os.str();
}

}  // namespace stochtransport
