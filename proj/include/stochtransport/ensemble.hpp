#pragma once

// Replica-parallel Monte Carlo over the pathwise spectral solution.
//
// Replicas are split into contiguous blocks whose layout depends only on
// n_replicas. Each block is accumulated by exactly one worker, and block
// partials are merged in block order afterwards, so every statistic is
// bit-identical for any worker count or schedule.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stochtransport/kernel.hpp"
#include "stochtransport/sampler.hpp"
#include "stochtransport/spectral.hpp"

namespace stochtransport {

/// Streaming mean and sum of squared deviations of complex samples
/// (Welford update, Chan et al. merge).
struct ComplexMoments {
    std::uint64_t n = 0;
    Complex mean{0.0, 0.0};
    double m2 = 0.0;     // sum |z - mean|^2
    double m2_re = 0.0;  // sum (Re z - Re mean)^2
    double m2_im = 0.0;

    void add(Complex z);
    void merge(const ComplexMoments& o);
    /// E|z - Ez|^2 estimate (n >= 2).
    double variance() const;
    /// sqrt(variance / n), the standard error of `mean` in modulus.
    double standard_error() const;
    double standard_error_re() const;
    double standard_error_im() const;
};

/// Streaming co-moment of a pair of complex samples: sum (x - mx) conj(y - my).
struct ComplexCoMoments {
    std::uint64_t n = 0;
    Complex mx{0.0, 0.0}, my{0.0, 0.0};
    Complex c{0.0, 0.0};

    void add(Complex x, Complex y);
    void merge(const ComplexCoMoments& o);
    Complex covariance() const;  // unbiased, n >= 2
};

/// Streaming central moments up to order four of real samples (Pebay merge).
struct RealMoments {
    std::uint64_t n = 0;
    double mean = 0.0, m2 = 0.0, m3 = 0.0, m4 = 0.0;

    void add(double x);
    void merge(const RealMoments& o);
    double variance() const;  // unbiased, n >= 2
    /// Large-sample standard error of variance(): sqrt((mu4 - mu2^2) / n).
    double variance_standard_error() const;
};

struct EnsembleConfig {
    double epsilon = 0.01;
    double dt = 1e-3;  // path grid step; epsilon >= dt
    std::size_t n_replicas = 1000;
    std::uint64_t seed = 0;
    unsigned workers = 1;
    std::vector<double> times;                  // observation times
    std::vector<Vec2> xis;                      // tracked wavevectors
    std::vector<std::pair<Vec2, Vec2>> pairs;   // covariance pairs (xi, eta)
};

struct EnsembleStats {
    std::size_t n_replicas = 0;
    std::vector<double> times;
    std::vector<Vec2> xis;
    std::vector<std::pair<Vec2, Vec2>> pairs;
    std::vector<std::vector<ComplexMoments>> modes;      // [time][xi]
    std::vector<std::vector<ComplexCoMoments>> cov;      // [time][pair]
    std::vector<std::vector<std::vector<Complex>>> cov_blocks;  // [time][pair][block]


    Complex mean(std::size_t ti, std::size_t xi) const { return modes[ti][xi].mean; }
    double standard_error(std::size_t ti, std::size_t xi) const { return modes[ti][xi].standard_error(); }
    Complex covariance(std::size_t ti, std::size_t p) const { return cov[ti][p].covariance(); }
    /// Batch-means standard error of covariance(): spread of the per-block
    /// estimates over sqrt(#blocks).
    double covariance_standard_error(std::size_t ti, std::size_t p) const;

    /// Fold another ensemble over the same observables into this one.
    void merge(const EnsembleStats& o);
};

/// Number and extent of the deterministic replica blocks.
std::size_t ensemble_block_count(std::size_t n_replicas);

/// The path sampler run_ensemble uses for `cfg`; replica r's path is
/// sampler.sample(p.sigmas.size(), cfg.seed, r).
PathSampler ensemble_sampler(const KernelSpec& k, const EnsembleConfig& cfg);

/// Runs n_replicas independent replicas (replica r uses sub-streams
/// (seed, k, r)) and accumulates the tracked modes and covariance pairs.
/// `first_replica` offsets replica indices so disjoint ensembles can be merged.
EnsembleStats run_ensemble(const SpectralProblem& p, const KernelSpec& k, const EnsembleConfig& cfg,
                           std::size_t first_replica = 0);

struct VarianceFieldEstimate {
    PhysicalField variance;
    PhysicalField standard_error;
    PhysicalField mean;
    std::size_t n_replicas = 0;
};

/// Per-grid-point sample variance of the reconstructed theta_eps(t, x).
VarianceFieldEstimate mc_variance_field(const SpectralProblem& p, const KernelSpec& k, double epsilon,
                                        double dt, std::size_t n_replicas, double t,
                                        std::uint64_t seed, unsigned workers = 1);

/// NDJSON, one record per (time, xi) and per (time, pair).
std::string ensemble_ndjson(const EnsembleStats& s);

/// CSV with columns t,xi1,xi2,re_mean,im_mean,var,se,re_closed,im_closed,z_score;
/// closed[ti][xi] is the reference value.
std::string ensemble_summary_csv(const EnsembleStats& s,
                                 const std::vector<std::vector<Complex>>& closed);

}  // namespace stochtransport
