#pragma once

// The trace density Vdot_eps and its primitive V_eps produced by the
// Skorohod decomposition of the regularised noise integral. They satisfy
// Var(G^eps_t) = 2 V_eps(t), and V_eps(t) -> gamma(t) / 2 as eps -> 0.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stochtransport/kernel.hpp"

namespace stochtransport {

struct VepsCurve {
    double epsilon = 0.0;
    KernelSpec kernel = KernelSpec::brownian();
    std::vector<double> t_grid;
    std::vector<double> vdot;
    std::vector<double> v;  // v[0] = 0, v[i] = int_0^{t_i} vdot

    /// sup_i |v_i - gamma(t_i) / 2| over grid points with t in [t_lo, t_hi].
    double sup_residual(double t_lo, double t_hi) const;
};

/// (2 eps)^{-2} int_0^t <1_[(t-eps)+, t+eps], 1_[(s-eps)+, s+eps]> ds.
double veps_dot(const KernelSpec& k, double epsilon, double t);

/// Exact primitive of veps_dot on an increasing grid starting at 0. Each
/// cell is integrated by adaptive quadrature split at the kinks of vdot, so
/// v is accurate to quadrature tolerance rather than to O(dt^2).
VepsCurve veps_cumulative(const KernelSpec& k, double epsilon, const std::vector<double>& t_grid);

/// |int phi dV_eps - (1/2) int phi dgamma| with both Stieltjes integrals
/// taken by the trapezoid rule on the curve's grid; phi sampled on that grid.
double weak_star_residual(const VepsCurve& curve, std::span<const double> phi);

/// Same, computing the curve on `t_grid` first.
double weak_star_residual(const KernelSpec& k, double epsilon, const std::vector<double>& t_grid,
                          std::span<const double> phi);

/// CSV with columns t,vdot,v,gamma_half,residual.
std::string veps_csv(const VepsCurve& curve);

}  // namespace stochtransport
