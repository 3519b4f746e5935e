#pragma once

// Two-scale transport on the unit torus [0,1)^2:
//
//   d theta = ((kappa + kappa_T) Lap theta + (v(t) . grad) theta) dt
//             + sum_j (v_j . grad) theta dW^j,
//
// with small-scale divergence-free fields v_j on a wavenumber shell driven by
// independent Brownian motions (Ito form, corrector kappa_T Lap), and a
// large-scale drift v(t) = sum_k sigma_k dG^{k,eps}/dt with constant sigma_k.
//
// Fields are held as Fourier coefficients f^(m) = int f e^{-2 pi i m.x} dx on
// an n x n grid (FFT index order, Nyquist row/column kept at zero).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "stochtransport/errors.hpp"
#include "stochtransport/kernel.hpp"
#include "stochtransport/sampler.hpp"
#include "stochtransport/spectral.hpp"

namespace stochtransport {

using IVec2 = std::array<int, 2>;

/// a cos(2 pi m.x + phase)
struct CosineMode {
    IVec2 m{0, 0};
    double amplitude = 1.0;
    double phase = 0.0;
};

/// v_{k,c} = c k^perp/|k| cos(2 pi k.x), v_{k,s} = c k^perp/|k| sin(2 pi k.x)
/// for each listed k (one representative per +-k pair).
struct SmallScaleFamily {
    int N = 0;
    double amplitude = 0.0;
    std::vector<IVec2> modes;

    /// All integer k with N <= |k| <= 2N in the half plane k1 > 0 or
    /// (k1 = 0, k2 > 0); amplitude c^2 = 2 kappa_T / #modes, which makes
    /// Q(x,x) = kappa_T Id.
    static SmallScaleFamily shell(int N, double kappa_T);
    static SmallScaleFamily single(IVec2 k, double amplitude);
    static SmallScaleFamily empty() { return {}; }

    std::size_t n_fields() const { return 2 * modes.size(); }
    bool is_empty() const { return modes.empty(); }
    int max_component() const;
    /// v_j(x); j = 2 i is the cosine field of modes[i], j = 2 i + 1 the sine.
    Vec2 field(std::size_t j, const Vec2& x) const;
    /// Q(x,x) = sum_j v_j(x) (x) v_j(x), row-major.
    std::array<double, 4> diagonal(const Vec2& x) const;
    /// max |m . v^_j(m)| over fields and their Fourier support.
    double divergence_residual() const;
};

/// Thrown when the explicit small-scale step would move mass more than the
/// configured fraction of a cell per step.
class CflError : public NumericalError {
public:
    CflError(const std::string& what, double suggested_dt) : NumericalError(what), suggested_dt_(suggested_dt) {}
    double suggested_dt() const { return suggested_dt_; }

private:
    double suggested_dt_;
};

struct TorusProblem {
    int n = 64;
    double kappa = 0.0;
    double kappa_T = 0.01;
    SmallScaleFamily small;
    std::vector<Vec2> sigmas;
    KernelSpec kernel = KernelSpec::fbm(0.75);
    double epsilon = 0.01;
    double dt = 1e-3;
    double horizon = 0.25;
    std::vector<CosineMode> theta0;
    std::vector<CosineMode> phi;
    int noise_levels = 2;  // Brownian increments resolved at dt / 2^noise_levels
    double cfl = 1.0;      // bound on 3 sqrt(2 kappa_T dt) / dx

    std::size_t n_steps() const;
    double dx() const { return 1.0 / n; }
    /// Throws DomainError for inconsistent settings and CflError when dt is
    /// too large for the small-scale step.
    void validate() const;
};

/// Coefficient array (n*n) of a cosine sum.
std::vector<Complex> cosine_coefficients(int n, const std::vector<CosineMode>& modes);
/// Grid values from coefficients.
std::vector<double> torus_physical(int n, const std::vector<Complex>& coeffs);
/// int f g dx for real f, g given by coefficients (Parseval).
double torus_inner(const std::vector<Complex>& f, const std::vector<Complex>& g);
double torus_norm2(const std::vector<Complex>& f);
/// sup of |cosine sum|, sampled on a samples x samples grid.
double cosine_sup(const std::vector<CosineMode>& modes, int samples = 512);

struct TwoScaleTrajectory {
    std::vector<double> times;                 // observation times
    std::vector<std::vector<Complex>> fields;  // coefficients at `times`
    double sup_initial = 0.0;                  // grid max |theta_0|
    double sup_max = 0.0;                      // max over steps of grid max |theta|
    double injected = 0.0;                     // sum over steps of ||Ito increment||^2
    double predicted = 0.0;                    // sum of h kappa_T ||grad theta_n||^2
};

struct SimulationOptions {
    int level = 0;                     // step dt / 2^level, level <= noise_levels
    std::vector<double> observe;       // observation times (multiples of the step)
    bool track_sup = false;
    bool track_energy = false;
};

/// Holds transforms, the path sampler and the mode tables for one worker.
class TwoScaleSimulator {
public:
    explicit TwoScaleSimulator(const TorusProblem& tp);
    ~TwoScaleSimulator();
    TwoScaleSimulator(const TwoScaleSimulator&) = delete;
    TwoScaleSimulator& operator=(const TwoScaleSimulator&) = delete;

    const TorusProblem& problem() const { return tp_; }

    /// Large-scale drive of `replica`, regularised on the step grid of `level`.
    RegularizedDrive drive(std::uint64_t seed, std::uint64_t replica, int level) const;

    /// One replica: FBM drive from sub-streams (seed, k, replica), Brownian
    /// increments from sub-stream (seed, tag, replica).
    TwoScaleTrajectory run(std::uint64_t seed, std::uint64_t replica, const SimulationOptions& opt);

    /// Same with a caller-supplied drive (on the step grid of opt.level).
    TwoScaleTrajectory run(const RegularizedDrive& drive, std::uint64_t seed, std::uint64_t replica,
                           const SimulationOptions& opt);

private:
    struct Impl;
    TorusProblem tp_;
    Impl* impl_;
};

TwoScaleTrajectory simulate_two_scale(const TorusProblem& tp, std::uint64_t seed,
                                      std::uint64_t replica = 0, const SimulationOptions& opt = {});

/// Exact per-mode solution with diffusivity kappa_eff (default kappa + kappa_T)
/// and constant-sigma transport, at every time of drive.t_grid.
std::vector<std::vector<Complex>> reduced_solve(const TorusProblem& tp, const RegularizedDrive& drive,
                                                double kappa_eff = -1.0);
/// Same at a single drive time index.
std::vector<Complex> reduced_at(const TorusProblem& tp, const RegularizedDrive& drive, std::size_t ti,
                                double kappa_eff = -1.0);

/// ||Q||_{L^2 -> L^2} from the exact block Gram matrices of the family.
double q_operator_norm(const SmallScaleFamily& f);
/// Power iteration through the covariance kernel applied by FFT on a grid
/// of size `grid` (0 picks the smallest grid resolving the shell).
double q_operator_norm_power(const SmallScaleFamily& f, int grid = 0, int iterations = 20,
                             std::uint64_t seed = 1);

/// max_t ||theta(t)||_inf - ||theta_0||_inf over the grid values of a run.
double maximum_principle_check(const TwoScaleTrajectory& traj);

struct BoundCheckConfig {
    std::size_t n_replicas = 200;
    std::uint64_t seed = 0;
    unsigned workers = 1;
    double t = -1.0;                      // observation time, default horizon
    std::size_t richardson_replicas = 8;  // paired runs at dt and dt/2
    std::size_t dx_replicas = 2;          // paired runs at n and 2n (0 disables)
};

struct ReplicaObservable {
    std::size_t replica = 0;
    double theta_phi = 0.0;         // <theta_N(t), phi>
    double reduced_phi = 0.0;       // <theta_red(t), phi>, kappa + kappa_T
    double reduced_half_phi = 0.0;  // same with kappa + kappa_T / 2
    double overshoot = 0.0;         // maximum_principle_check of the replica
};

struct BoundCheck {
    int N = 0;
    std::size_t n_modes = 0;
    double q_norm = 0.0;
    double t = 0.0;
    double lhs = 0.0;        // mean of <theta_N - theta_red, phi>^2, reduction kappa + kappa_T
    double lhs_se = 0.0;
    double lhs_half = 0.0;   // same against the kappa + kappa_T / 2 reduction
    double lhs_half_se = 0.0;
    double rhs = 0.0;        // T ||Q|| ||theta_0||_inf^2 ||phi||_2^2
    double budget_dt = 0.0;
    double budget_dx = 0.0;
    double budget = 0.0;
    bool pass = false;
    // L2 distance of the replica mean of theta_N - theta_red from zero.
    double mean_distance = 0.0;
    double mean_distance_se = 0.0;
    double mean_distance_half = 0.0;
    double max_overshoot = 0.0;  // worst maximum-principle excess over replicas
    std::vector<ReplicaObservable> replicas;
};

BoundCheck theorem_bound_check(const TorusProblem& tp, const BoundCheckConfig& cfg);

/// CSV with columns N,modes,q_norm,lhs,se,rhs,budget,pass,lhs_half,mean_distance,mean_distance_se,mean_distance_half.
std::string bound_table_csv(const std::vector<BoundCheck>& rows);

}  // namespace stochtransport
