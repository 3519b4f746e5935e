#include "stochtransport/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "stochtransport/errors.hpp"
#include "stochtransport/fft.hpp"

namespace stochtransport {

InitialDatum InitialDatum::gaussian(double a) {
    if (!(a > 0.0)) throw DomainError("gaussian datum: a must be positive");
    InitialDatum d;
    d.transform_ = [a](const Vec2& nu) { return Complex(a * std::exp(-kPi * a * norm2(nu)), 0.0); };
    d.physical_ = [a](const Vec2& x) { return std::exp(-kPi * norm2(x) / a); };
    d.width_ = a;
    return d;
}

InitialDatum InitialDatum::from_transform(std::function<Complex(const Vec2&)> transform,
                                          std::function<double(const Vec2&)> physical) {
    InitialDatum d;
    d.transform_ = std::move(transform);
    d.physical_ = std::move(physical);
    return d;
}

double InitialDatum::value(const Vec2& x) const {
    if (!physical_) throw DomainError("initial datum has no pointwise form");
    return physical_(x);
}

FrequencyLattice FrequencyLattice::from_extent(double xi_max, double dnu) {
    if (!(xi_max > 0.0) || !(dnu > 0.0)) throw DomainError("lattice: extent and spacing must be positive");
    const long n = std::lround(2.0 * xi_max / dnu);
    if (n < 2 || n % 2 != 0 || std::abs(n * dnu - 2.0 * xi_max) > 1e-9 * xi_max)
        throw DomainError("lattice: 2 xi_max / dnu must be an even integer");
    return {static_cast<int>(n), dnu};
}

double SpectralProblem::sigma2(const Vec2& xi) const {
    double s = 0.0;
    for (const auto& sg : sigmas) {
        const double d = dot(sg, xi);
        s += d * d;
    }
    return s;
}

double SpectralProblem::rho(const Vec2& xi, const Vec2& eta) const {
    double s = 0.0;
    for (const auto& sg : sigmas) s += dot(sg, xi) * dot(sg, eta);
    return s;
}

std::array<double, 4> SpectralProblem::q_matrix() const {
    std::array<double, 4> q{0, 0, 0, 0};
    for (const auto& s : sigmas) {
        q[0] += s[0] * s[0];
        q[1] += s[0] * s[1];
        q[2] += s[1] * s[0];
        q[3] += s[1] * s[1];
    }
    return q;
}

void SpectralProblem::validate() const {
    if (kappa < 0.0) throw DomainError("kappa must be nonnegative");
    if (!(horizon > 0.0)) throw DomainError("horizon must be positive");
}

double PhysicalField::max_abs() const {
    double m = 0.0;
    for (double v : values) m = std::max(m, std::abs(v));
    return m;
}

ModeTrajectory solve_mode(const SpectralProblem& p, const RegularizedDrive& drive, const Vec2& xi) {
    if (drive.n_components() != p.sigmas.size())
        throw DomainError("solve_mode: drive has a different number of components than sigmas");
    ModeTrajectory tr;
    tr.xi = xi;
    tr.times = drive.t_grid;
    tr.values.resize(tr.times.size());
    const Complex h0 = p.theta0_hat(xi);
    const double k2 = norm2(xi);
    std::vector<double> proj(p.sigmas.size());
    for (std::size_t k = 0; k < proj.size(); ++k) proj[k] = dot(p.sigmas[k], xi);
    for (std::size_t i = 0; i < tr.times.size(); ++i) {
        double phase = 0.0;
        for (std::size_t k = 0; k < proj.size(); ++k) phase += proj[k] * drive.g_values[k][i];
        tr.values[i] = h0 * std::exp(-p.kappa * k2 * tr.times[i]) * std::polar(1.0, phase);
    }
    return tr;
}

double verify_ode_residual(const ModeTrajectory& traj, const SpectralProblem& p,
                           const RegularizedDrive& drive) {
    const auto& t = traj.times;
    const auto& v = traj.values;
    if (t.size() != drive.t_grid.size()) throw DomainError("verify_ode_residual: grid mismatch");
    const double k2 = norm2(traj.xi);
    std::vector<double> proj(p.sigmas.size());
    for (std::size_t k = 0; k < proj.size(); ++k) proj[k] = dot(p.sigmas[k], traj.xi);

    auto drift = [&](std::size_t i) {
        double r = 0.0;
        for (std::size_t k = 0; k < proj.size(); ++k) r += proj[k] * drive.rates[k][i];
        return r;
    };
    Complex int_theta{0.0, 0.0}, int_noise{0.0, 0.0};
    double worst = 0.0;
    const Complex I(0.0, 1.0);
    for (std::size_t i = 1; i < t.size(); ++i) {
        const double h = t[i] - t[i - 1];
        int_theta += 0.5 * h * (v[i] + v[i - 1]);
        int_noise += 0.5 * h * (v[i] * drift(i) + v[i - 1] * drift(i - 1));
        const Complex res = v[i] - v[0] + p.kappa * k2 * int_theta - I * int_noise;
        worst = std::max(worst, std::abs(res));
    }
    return worst;
}

std::vector<Complex> lattice_initial(const SpectralProblem& p) {
    const auto& L = p.lattice;
    std::vector<Complex> out(L.size());
    for (int i = 0; i < L.n; ++i)
        for (int j = 0; j < L.n; ++j)
            out[static_cast<std::size_t>(i) * L.n + j] = p.theta0.transform_at_frequency(L.frequency(i, j));
    return out;
}

std::vector<Complex> lattice_modes(const SpectralProblem& p, const RegularizedDrive& drive,
                                   std::size_t ti) {
    const auto initial = lattice_initial(p);
    return lattice_modes(p, initial, drive, ti);
}

std::vector<Complex> lattice_modes(const SpectralProblem& p, std::span<const Complex> initial,
                                   const RegularizedDrive& drive, std::size_t ti) {
    const auto& L = p.lattice;
    if (initial.size() != L.size()) throw DomainError("lattice_modes: initial array size mismatch");
    const int n = L.n;
    const double t = drive.t_grid.at(ti);
    Vec2 shift{0.0, 0.0};
    for (std::size_t k = 0; k < p.sigmas.size(); ++k) {
        shift[0] += p.sigmas[k][0] * drive.g_values[k][ti];
        shift[1] += p.sigmas[k][1] * drive.g_values[k][ti];
    }
    // The phase factor separates per axis: e^{2 pi i nu.shift}.
    std::vector<Complex> ph0(n), ph1(n);
    std::vector<double> heat(n);
    for (int i = 0; i < n; ++i) {
        const double nu = (i - n / 2) * L.dnu;
        ph0[i] = std::polar(1.0, kTwoPi * nu * shift[0]);
        ph1[i] = std::polar(1.0, kTwoPi * nu * shift[1]);
        heat[i] = std::exp(-p.kappa * kTwoPi * kTwoPi * nu * nu * t);
    }
    std::vector<Complex> out(L.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(i) * n + j] =
                initial[static_cast<std::size_t>(i) * n + j] * heat[i] * heat[j] * ph0[i] * ph1[j];
    return out;
}

PhysicalField reconstruct(const FrequencyLattice& lattice, std::span<const Complex> modes,
                          double imag_tol) {
    Fft2d fft(lattice.n);
    return reconstruct(lattice, modes, fft, imag_tol);
}

PhysicalField reconstruct(const FrequencyLattice& lattice, std::span<const Complex> modes,
                          Fft2d& fft, double imag_tol) {
    const int n = lattice.n;
    if (modes.size() != lattice.size()) throw DomainError("reconstruct: mode array size mismatch");
    if (fft.n() != n) throw DomainError("reconstruct: transform size mismatch");
    auto buf = fft.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * n + j;
            buf[idx] = ((i + j) % 2 == 0) ? modes[idx] : -modes[idx];
        }
    fft.backward();
    PhysicalField f;
    f.n = n;
    f.dx = lattice.dx();
    f.values.resize(lattice.size());
    // The centred index shifts leave a constant phase e^{i pi n / 2}.
    const double w = (n % 4 == 0 ? 1.0 : -1.0) * lattice.dnu * lattice.dnu;
    double worst_imag = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * n + j;
            const Complex z = ((i + j) % 2 == 0 ? w : -w) * buf[idx];
            f.values[idx] = z.real();
            worst_imag = std::max(worst_imag, std::abs(z.imag()));
        }
    if (worst_imag > imag_tol) {
        std::ostringstream os;
        os << "reconstruct: imaginary residue " << worst_imag << " exceeds " << imag_tol
           << " (modes are not conjugate symmetric)";
        throw NumericalError(os.str());
    }
    return f;
}

std::string field_csv(const PhysicalField& f) {
    std::ostringstream os;
    os << std::setprecision(17) << "x,y,value\n";
    for (int i = 0; i < f.n; ++i)
        for (int j = 0; j < f.n; ++j) {
            const double x = (i - f.n / 2) * f.dx, y = (j - f.n / 2) * f.dx;
            os << x << ',' << y << ',' << f.at(i, j) << '\n';
        }
    return os.str();
}

std::string modes_csv(const FrequencyLattice& lattice, std::span<const Complex> modes) {
    std::ostringstream os;
    os << std::setprecision(17) << "xi1,xi2,re,im\n";
    for (int i = 0; i < lattice.n; ++i)
        for (int j = 0; j < lattice.n; ++j) {
            const Vec2 xi = wavevector(lattice.frequency(i, j));
            const auto& z = modes[static_cast<std::size_t>(i) * lattice.n + j];
            os << xi[0] << ',' << xi[1] << ',' << z.real() << ',' << z.imag() << '\n';
        }
    return os.str();
}

}  // namespace stochtransport
