#pragma once

// Limiting (eps -> 0) mean and covariance of the Fourier modes and their
// physical-space counterparts. Closed forms come from the Gaussian
// characteristic function, E exp(i a G_t) = exp(-a^2 gamma(t) / 2); the ODE
// routes integrate the equivalent differential identities, in which the
// noise enters through (1/2) d gamma (or dV_eps at finite eps).

#include <span>
#include <string>
#include <vector>

#include "stochtransport/kernel.hpp"
#include "stochtransport/spectral.hpp"
#include "stochtransport/veps.hpp"

namespace stochtransport {

enum class Provenance { closed_form, ode_quadrature, mc_estimate };

struct MeanSolution {
    Vec2 xi{};
    std::vector<double> times;
    std::vector<Complex> values;
    Provenance provenance = Provenance::closed_form;
    double epsilon = 0.0;  // ode_quadrature only
};

struct CovarianceSolution {
    Vec2 xi{};
    Vec2 eta{};
    double rho = 0.0;
    std::vector<double> times;
    std::vector<Complex> values;
    Provenance provenance = Provenance::closed_form;
};

/// L f = div(Q grad f) with Q = sum_k sigma_k (x) sigma_k; Fourier symbol -xi^T Q xi.
struct EllipticOperatorSpec {
    std::array<double, 4> q{};

    static EllipticOperatorSpec from(const SpectralProblem& p);
    double symbol(const Vec2& xi) const {
        return -(q[0] * xi[0] * xi[0] + (q[1] + q[2]) * xi[0] * xi[1] + q[3] * xi[1] * xi[1]);
    }
    bool positive_semidefinite() const;
};

/// e(t, xi) = theta0^(xi) exp(-kappa |xi|^2 t - sigma^2(xi) gamma(t) / 2).
Complex mean_closed(const SpectralProblem& p, const KernelSpec& k, double t, const Vec2& xi);
MeanSolution mean_closed(const SpectralProblem& p, const KernelSpec& k,
                         const std::vector<double>& times, const Vec2& xi);

struct MeanOdeResult {
    MeanSolution rk4;          // RK4 of de = -kappa|xi|^2 e dt - sigma^2 e dV_eps
    MeanSolution exponential;  // theta0^ exp(-kappa|xi|^2 t - sigma^2 V_eps(t))
    double max_disagreement = 0.0;
};

/// Integrates the finite-eps mean equation on `curve`'s grid. Refuses
/// singular kernels.
MeanOdeResult mean_ode(const SpectralProblem& p, const VepsCurve& curve, const Vec2& xi);
MeanOdeResult mean_ode(const SpectralProblem& p, const KernelSpec& k, double epsilon,
                       const std::vector<double>& t_grid, const Vec2& xi);

/// C(t,xi,eta) = theta0^(xi) conj(theta0^(eta)) e^{-kappa(|xi|^2+|eta|^2) t}
///   (e^{-sigma^2(xi-eta) gamma/2} - e^{-(sigma^2(xi)+sigma^2(eta)) gamma/2}).
Complex cov_closed(const SpectralProblem& p, const KernelSpec& k, double t, const Vec2& xi,
                   const Vec2& eta);

/// RK4 of dC = -kappa(|xi|^2+|eta|^2) C dt - sigma^2(xi-eta) C dgamma/2
///             + rho(xi,eta) e(xi) conj(e(eta)) dgamma, C(0) = 0,
/// with e in closed form. Refuses singular kernels.
CovarianceSolution cov_ode(const SpectralProblem& p, const KernelSpec& k,
                           const std::vector<double>& t_grid, const Vec2& xi, const Vec2& eta);

/// Inverse transform of mean_closed over p.lattice.
PhysicalField mean_physical(const SpectralProblem& p, const KernelSpec& k, double t);

/// max over the lattice of |d_t e - (-kappa|xi|^2 - sigma^2(xi) gamma'(t)/2) e|, with
/// d_t by a fourth-order central difference. Needs t > 2e-4.
double mean_pde_residual(const SpectralProblem& p, const KernelSpec& k, double t);

/// Reduced symmetric lattice for pair sums: nu = (i, j) dnu, |i|,|j| <= xi_max / dnu.
struct PairLattice {
    double xi_max = 4.0;
    double dnu = 0.25;

    int half() const;           // points per half axis
    int points_per_axis() const { return 2 * half() + 1; }
    /// Lattice of the difference frequencies, which carries the variance field:
    /// n = 4 half(), so every difference except +2 half() fits; that one is
    /// folded onto -2 half(), which is the same grid function.
    FrequencyLattice difference_lattice() const { return {4 * half(), dnu}; }
};

/// Vhat(t, D) = sum_mu C(t, mu + D, mu) dnu^2 on the difference lattice,
/// accumulated by direct summation over all pairs of the reduced lattice.
std::vector<Complex> variance_spectrum(const SpectralProblem& p, const KernelSpec& k, double t,
                                       const PairLattice& pl);

/// V(t, x) = sum_{xi,eta} e^{2 pi i (xi - eta).x} C(t, xi, eta) dxi^2 deta^2.
PhysicalField variance_physical(const SpectralProblem& p, const KernelSpec& k, double t,
                                const PairLattice& pl = {});

/// Residual of the variance equation on the difference lattice:
///   d_t Vhat(D) = sum_mu [ -kappa(|xi|^2+|eta|^2) C - sigma^2(D) gamma'/2 C
///                          + rho e(xi) conj(e(eta)) gamma' ] dnu^2,
/// with (xi, eta) = (mu + D, mu). At kappa = 0 this is the Fourier form of
/// d_t V = (1/2) L V gamma' + sum_k ((sigma_k.grad) theta_bar)^2 gamma'.
double variance_pde_residual(const SpectralProblem& p, const KernelSpec& k, double t,
                             const PairLattice& pl = {});

/// Bound on the error from truncating the pair sum to the reduced lattice.
double variance_truncation_bound(const SpectralProblem& p, const PairLattice& pl);

struct SmallTimeExponents {
    double slope_mean = 0.0;  // of log ||theta_bar(t) - theta0||_2
    double slope_sd = 0.0;    // of log ||sqrt V(t)||_2
    double se_mean = 0.0;     // regression standard errors
    double se_sd = 0.0;
};

/// Least-squares log-log slopes over t_sequence (kappa must be 0). Norms by
/// Parseval on p.lattice.
SmallTimeExponents smalltime_exponents(const SpectralProblem& p, const KernelSpec& k,
                                       const std::vector<double>& t_sequence);

struct ExponentRow {
    double hurst = 0.0;
    SmallTimeExponents fit;
};

/// CSV with columns H,slope_mean,slope_sd,ci (ci = 3 regression standard errors).
std::string exponent_table_csv(const std::vector<ExponentRow>& rows);

}  // namespace stochtransport
