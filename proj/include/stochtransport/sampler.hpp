#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stochtransport/kernel.hpp"
#include "stochtransport/rng.hpp"

namespace stochtransport {

/// One multi-component Gaussian path sampled at t_i = i * dt, i = 0..n_steps.
struct DrivePath {
    double dt = 0.0;
    std::size_t n_steps = 0;
    std::uint64_t seed = 0;
    std::uint64_t replica = 0;
    std::vector<std::vector<double>> values;  // [component][i], values[k][0] == 0

    std::size_t n_components() const { return values.size(); }
    double horizon() const { return dt * static_cast<double>(n_steps); }
    /// Linear interpolation of component k at 0 <= t <= horizon().
    double value_at(std::size_t k, double t) const;
};

/// The epsilon-regularised drives int_0^t (G_{s+eps} - G_{(s-eps)+}) / (2 eps) ds
/// and their rates (the integrand) on a time grid.
struct RegularizedDrive {
    double epsilon = 0.0;
    std::vector<double> t_grid;
    std::vector<std::vector<double>> g_values;  // [component][i]
    std::vector<std::vector<double>> rates;     // [component][i], d/dt of g_values

    std::size_t n_components() const { return g_values.size(); }
};

/// Exact sampler for the increments of a stationary-increment process on a
/// uniform grid. The increment covariance is symmetric Toeplitz; it is
/// factored once in O(n^2) by the Durbin-Levinson recursion (the innovations
/// form of its Cholesky factorisation), and each draw then costs O(n^2).
class PathSampler {
public:
    PathSampler(const KernelSpec& kernel, double dt, std::size_t n_steps);

    double dt() const { return dt_; }
    std::size_t n_steps() const { return n_steps_; }

    /// Component k of replica r is drawn from sub-stream (seed, k, r).
    DrivePath sample(std::size_t n_components, std::uint64_t seed, std::uint64_t replica = 0) const;

    /// Fills `path` (size n_steps + 1) with one draw from `engine`.
    void draw(Engine& engine, std::span<double> path) const;

    /// Autocovariance r(h) = Cov(X_0, X_h) of the increments used.
    const std::vector<double>& increment_autocov() const { return autocov_; }

private:
    double dt_;
    std::size_t n_steps_;
    std::vector<double> autocov_;
    std::vector<double> coeffs_;     // packed rows phi_{n,1..n}, n = 1..n_steps-1
    std::vector<std::size_t> row_;   // offset of row n in coeffs_
    std::vector<double> innov_sd_;   // sqrt(v_n)
};

DrivePath sample_paths(const KernelSpec& kernel, double dt, std::size_t n_steps,
                       std::size_t n_components, std::uint64_t seed);

/// Requires epsilon >= dt and max(t_grid) + epsilon <= path horizon.
RegularizedDrive regularize(const DrivePath& path, double epsilon, const std::vector<double>& t_grid);

/// NDJSON audit records, one line per component: {seed, replica, k, dt, values}.
std::string path_to_ndjson(const DrivePath& path);

}  // namespace stochtransport
