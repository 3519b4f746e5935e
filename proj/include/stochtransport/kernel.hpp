#pragma once

// Covariance algebra for centred Gaussian processes with stationary
// increments that vanish at zero. Everything is expressed through the
// variance function gamma(t) = Var(G_t), extended by parity to negative
// arguments.

#include <memory>
#include <string>
#include <variant>
#include <vector>

namespace stochtransport {

struct Brownian {};

/// Fractional Brownian motion normalised so that gamma(1) = 1.
struct Fractional {
    double hurst;
};

/// Locally FBM-like, memory lost on the time scale 1/lambda:
/// gamma(t) = 2 alpha int_0^t (t-u) u^{2H-2} e^{-lambda u} du.
struct DampedFractional {
    double hurst;
    double lambda;
    double alpha = 1.0;
};

/// gamma given on a strictly increasing grid starting at t = 0 with
/// gamma(0) = 0, interpolated by a monotone piecewise cubic.
struct TabulatedGamma {
    std::vector<double> grid;
    std::vector<double> values;
};

using KernelVariant = std::variant<Brownian, Fractional, DampedFractional, TabulatedGamma>;

/// Immutable, validated kernel description. Cheap to copy.
class KernelSpec {
public:
    static KernelSpec brownian();
    static KernelSpec fbm(double hurst);
    static KernelSpec damped_fbm(double hurst, double lambda, double alpha = 1.0);
    static KernelSpec tabulated(std::vector<double> grid, std::vector<double> values);

    const KernelVariant& variant() const { return *variant_; }
    std::string describe() const;

    // Cached monotone interpolant for tabulated kernels (null otherwise).
    struct Interpolant;
    const Interpolant* interpolant() const { return interp_.get(); }

private:
    explicit KernelSpec(KernelVariant v);
    std::shared_ptr<const KernelVariant> variant_;
    std::shared_ptr<const Interpolant> interp_;
};

enum class Regularity { regular, singular };

struct RegularityClass {
    Regularity tag;
    std::string reason;
    bool is_regular() const { return tag == Regularity::regular; }
};

/// Var(G_t). Throws DomainError for t < 0, RangeError beyond a table.
double gamma(const KernelSpec& k, double t);

/// Density of d gamma at t > 0. Returns +infinity where the density is
/// unbounded (t = 0 for FBM with H < 1/2).
double dgamma(const KernelSpec& k, double t);

/// Cov(G_t, G_s).
double cov_R(const KernelSpec& k, double t, double s);

/// Cov(G_b - G_a, G_d - G_c) = <1_[a,b], 1_[c,d]> in the reproducing kernel
/// space.
double increment_cov(const KernelSpec& k, double a, double b, double c, double d);

RegularityClass classify(const KernelSpec& k, double horizon);

/// Limit of dgamma as t -> infinity for a damped kernel:
/// 2 alpha Gamma(2H-1) lambda^{-(2H-1)}.
double damped_density_plateau(const DampedFractional& d);

}  // namespace stochtransport
