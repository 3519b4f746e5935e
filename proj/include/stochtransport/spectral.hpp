#pragma once

// Pathwise solution of the constant-coefficient transport-diffusion equation
//   d theta = kappa Lap theta dt + sum_k (sigma_k . grad) theta dG^{k,eps}
// mode by mode in Fourier space, and reconstruction of physical fields.
//
// Conventions: the initial datum's transform uses f^(nu) = int e^{-2 pi i nu.x} f(x) dx
// with nu an ordinary frequency. Fourier-side operations take the wavevector
// xi = 2 pi nu, under which Lap -> -|xi|^2 and (sigma . grad) -> i sigma.xi.

#include <array>
#include <complex>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stochtransport/sampler.hpp"

namespace stochtransport {

using Vec2 = std::array<double, 2>;
using Complex = std::complex<double>;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

inline double dot(const Vec2& a, const Vec2& b) { return a[0] * b[0] + a[1] * b[1]; }
inline double norm2(const Vec2& a) { return dot(a, a); }
inline Vec2 wavevector(const Vec2& nu) { return {kTwoPi * nu[0], kTwoPi * nu[1]}; }

/// Real initial datum known through its transform (and optionally pointwise).
class InitialDatum {
public:
    /// theta0(x) = exp(-pi |x|^2 / a), transform a exp(-pi a |nu|^2).
    static InitialDatum gaussian(double a);
    static InitialDatum from_transform(std::function<Complex(const Vec2& nu)> transform,
                                       std::function<double(const Vec2& x)> physical = {});

    Complex transform_at_frequency(const Vec2& nu) const { return transform_(nu); }
    bool has_physical() const { return static_cast<bool>(physical_); }
    double value(const Vec2& x) const;
    /// Gaussian width parameter when the datum is a Gaussian bump.
    std::optional<double> gaussian_width() const { return width_; }

private:
    std::function<Complex(const Vec2&)> transform_;
    std::function<double(const Vec2&)> physical_;
    std::optional<double> width_;
};

/// n x n lattice of ordinary frequencies nu = ((i - n/2) dnu, (j - n/2) dnu),
/// dual to the spatial grid x = ((m - n/2) dx, ...) with dx = 1 / (n dnu).
/// Storage order is row-major in (i, j), i indexing the first coordinate.
struct FrequencyLattice {
    int n = 256;
    double dnu = 1.0 / 16.0;

    /// Lattice covering [-xi_max, xi_max) with spacing dnu.
    static FrequencyLattice from_extent(double xi_max, double dnu);

    double xi_max() const { return 0.5 * n * dnu; }
    double dx() const { return 1.0 / (n * dnu); }
    double half_period() const { return 0.5 / dnu; }
    Vec2 frequency(int i, int j) const { return {(i - n / 2) * dnu, (j - n / 2) * dnu}; }
    Vec2 position(int i, int j) const { return {(i - n / 2) * dx(), (j - n / 2) * dx()}; }
    std::size_t size() const { return static_cast<std::size_t>(n) * n; }
};

struct SpectralProblem {
    double kappa = 0.0;
    std::vector<Vec2> sigmas;
    InitialDatum theta0 = InitialDatum::gaussian(1.0);
    FrequencyLattice lattice;
    double horizon = 1.0;

    /// theta0^ at wavevector xi.
    Complex theta0_hat(const Vec2& xi) const {
        return theta0.transform_at_frequency({xi[0] / kTwoPi, xi[1] / kTwoPi});
    }
    /// sum_k (sigma_k . xi)^2
    double sigma2(const Vec2& xi) const;
    /// sum_k (sigma_k . xi)(sigma_k . eta)
    double rho(const Vec2& xi, const Vec2& eta) const;
    /// Q = sum_k sigma_k (x) sigma_k, row-major.
    std::array<double, 4> q_matrix() const;
    void validate() const;
};

struct ModeTrajectory {
    Vec2 xi{};
    std::vector<double> times;
    std::vector<Complex> values;
};

struct PhysicalField {
    int n = 0;
    double dx = 0.0;
    std::vector<double> values;  // row-major (i, j) matching FrequencyLattice::position

    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * n + j]; }
    double max_abs() const;
};

/// theta^_eps(t, xi) = theta0^(xi) exp(-kappa |xi|^2 t + i sum_k (sigma_k.xi) G^{k,eps}_t)
/// on the drive's time grid.
ModeTrajectory solve_mode(const SpectralProblem& p, const RegularizedDrive& drive, const Vec2& xi);

/// Max over the grid of the integral-equation residual, integrals by the
/// trapezoid rule (O(dt^2)).
double verify_ode_residual(const ModeTrajectory& traj, const SpectralProblem& p,
                           const RegularizedDrive& drive);

/// theta0^ at every lattice frequency.
std::vector<Complex> lattice_initial(const SpectralProblem& p);

/// theta^_eps at every lattice frequency for drive time index `ti`.
std::vector<Complex> lattice_modes(const SpectralProblem& p, const RegularizedDrive& drive,
                                   std::size_t ti);
/// Same, reusing a precomputed lattice_initial(p).
std::vector<Complex> lattice_modes(const SpectralProblem& p, std::span<const Complex> initial,
                                   const RegularizedDrive& drive, std::size_t ti);

/// theta(x) = dnu^2 sum_nu e^{2 pi i nu.x} theta^(nu) by FFT. Throws
/// NumericalError if the imaginary residue exceeds `imag_tol`.
PhysicalField reconstruct(const FrequencyLattice& lattice, std::span<const Complex> modes,
                          double imag_tol = 1e-9);
class Fft2d;
/// Same, with a caller-owned transform of size lattice.n (for hot loops).
PhysicalField reconstruct(const FrequencyLattice& lattice, std::span<const Complex> modes,
                          Fft2d& fft, double imag_tol = 1e-9);

/// CSV with columns x,y,value.
std::string field_csv(const PhysicalField& f);
/// CSV with columns xi1,xi2,re,im (xi are wavevectors).
std::string modes_csv(const FrequencyLattice& lattice, std::span<const Complex> modes);

}  // namespace stochtransport
