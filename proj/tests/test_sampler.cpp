#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "stochtransport/ensemble.hpp"
#include "stochtransport/errors.hpp"
#include "stochtransport/sampler.hpp"
#include "stochtransport/veps.hpp"

using namespace stochtransport;
using doctest::Approx;

namespace {

DrivePath injected(double dt, std::size_t n, double (*g)(double)) {
    DrivePath p;
    p.dt = dt;
    p.n_steps = n;
    p.values.assign(1, std::vector<double>(n + 1));
    for (std::size_t i = 0; i <= n; ++i) p.values[0][i] = g(dt * static_cast<double>(i));
    return p;
}

std::vector<double> uniform_grid(double t_max, std::size_t n) {
    std::vector<double> t(n + 1);
    for (std::size_t i = 0; i <= n; ++i) t[i] = t_max * static_cast<double>(i) / static_cast<double>(n);
    return t;
}

}  // namespace

TEST_CASE("Brownian paths have unit variance at t = 1") {
    const PathSampler s(KernelSpec::brownian(), 0.01, 100);
    RealMoments m;
    for (std::uint64_t r = 0; r < 20000; ++r) m.add(s.sample(1, 42, r).values[0][100]);
    CHECK(m.variance() >= 0.96);
    CHECK(m.variance() <= 1.04);
    CHECK(std::abs(m.mean) <= 3.0 * std::sqrt(m.variance() / 20000.0));
}

TEST_CASE("FBM two-time covariance matches cov_R") {
    const auto k = KernelSpec::fbm(0.75);
    const PathSampler s(k, 0.01, 200);
    std::vector<double> prod;
    double sum = 0.0;
    const std::size_t n = 20000;
    for (std::uint64_t r = 0; r < n; ++r) {
        const auto p = s.sample(1, 5, r);
        prod.push_back(p.values[0][100] * p.values[0][200]);
        sum += prod.back();
    }
    const double mean = sum / n;
    double ss = 0.0;
    for (double x : prod) ss += (x - mean) * (x - mean);
    const double se = std::sqrt(ss / (n - 1) / n);
    CHECK(std::abs(mean - std::sqrt(2.0)) <= 3.0 * se);
    CHECK(cov_R(k, 1.0, 2.0) == Approx(std::sqrt(2.0)));
}

TEST_CASE("sampling is deterministic") {
    for (const auto& k : {KernelSpec::brownian(), KernelSpec::fbm(0.75), KernelSpec::damped_fbm(0.7, 1.0)}) {
        const auto a = sample_paths(k, 0.01, 150, 3, 1234);
        const auto b = sample_paths(k, 0.01, 150, 3, 1234);
        CHECK(a.values == b.values);
        for (const auto& c : a.values) CHECK(c[0] == 0.0);
        const auto c = sample_paths(k, 0.01, 150, 3, 1235);
        CHECK(a.values != c.values);
    }
}

TEST_CASE("increment autocovariance is the kernel's") {
    const auto k = KernelSpec::fbm(0.75);
    const PathSampler s(k, 0.02, 50);
    for (std::size_t h = 0; h < 50; ++h) {
        const double t = 0.02 * static_cast<double>(h);
        CHECK(s.increment_autocov()[h] == Approx(increment_cov(k, 0.0, 0.02, t, t + 0.02)).epsilon(1e-12));
    }
}

TEST_CASE("non positive definite covariance is rejected") {
    std::vector<double> grid, values;
    for (int i = 0; i <= 10; ++i) {
        grid.push_back(0.1 * i);
        values.push_back(std::pow(0.1 * i, 3.0));
    }
    const auto k = KernelSpec::tabulated(grid, values);
    CHECK_THROWS_AS(PathSampler(k, 0.01, 50), NumericalError);
    CHECK_THROWS_AS(PathSampler(KernelSpec::brownian(), 0.0, 50), DomainError);
}

TEST_CASE("regularize of the zero path is zero") {
    const auto p = injected(0.01, 200, [](double) { return 0.0; });
    const auto d = regularize(p, 0.05, uniform_grid(1.0, 100));
    for (double g : d.g_values[0]) CHECK(g == 0.0);
    for (double r : d.rates[0]) CHECK(r == 0.0);
}

TEST_CASE("regularize of s^2 integrates the difference quotient exactly") {
    // For t >= eps the drive is t^2 + eps^2 / 6; the eps^2 / 6 is the
    // boundary layer from G_{(s-eps)+} = 0 on s < eps.
    const double eps = 0.01, dt = 1e-4;
    const auto p = injected(dt, 11000, [](double s) { return s * s; });
    const auto grid = uniform_grid(1.0, 100);
    const auto d = regularize(p, eps, grid);
    CHECK(d.g_values[0][0] == 0.0);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double t = grid[i];
        if (t < eps) continue;
        CAPTURE(t);
        CHECK(std::abs(d.g_values[0][i] - (t * t + eps * eps / 6.0)) <= 1e-8);
        CHECK(std::abs(d.g_values[0][i] - t * t) <= 1e-8 + eps * eps / 6.0);
        CHECK(std::abs(d.rates[0][i] - 2.0 * t) <= 1e-8);
    }
}

TEST_CASE("regularized drive variance matches 2 V_eps") {
    const auto k = KernelSpec::fbm(0.75);
    const double eps = 0.05, dt = 0.005;
    const PathSampler s(k, dt, 220);
    RealMoments m;
    for (std::uint64_t r = 0; r < 20000; ++r) {
        const auto d = regularize(s.sample(1, 9, r), eps, {0.0, 1.0});
        m.add(d.g_values[0][1]);
    }
    const double target = 2.0 * 0.48833513573039572091;
    CHECK(std::abs(m.variance() - target) <= 3.0 * m.variance_standard_error());
}

TEST_CASE("marginals are Gaussian") {
    const PathSampler s(KernelSpec::fbm(0.75), 0.01, 100);
    RealMoments m;
    const double n = 20000;
    for (std::uint64_t r = 0; r < 20000; ++r) m.add(s.sample(1, 77, r).values[0][100]);
    const double var = m.m2 / n;
    const double skew = (m.m3 / n) / std::pow(var, 1.5);
    const double kurt = (m.m4 / n) / (var * var) - 3.0;
    CHECK(std::abs(skew) <= 5.0 * std::sqrt(6.0 / n));
    CHECK(std::abs(kurt) <= 5.0 * std::sqrt(24.0 / n));
}

TEST_CASE("components are independent") {
    const PathSampler s(KernelSpec::fbm(0.75), 0.01, 100);
    std::vector<double> x;
    double sum = 0.0;
    const std::size_t n = 20000;
    for (std::uint64_t r = 0; r < n; ++r) {
        const auto p = s.sample(2, 3, r);
        x.push_back(p.values[0][100] * p.values[1][100]);
        sum += x.back();
    }
    const double mean = sum / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    CHECK(std::abs(mean) <= 3.0 * std::sqrt(ss / (n - 1) / n));
}

TEST_CASE("regularize is linear") {
    const auto a = sample_paths(KernelSpec::fbm(0.75), 0.01, 150, 2, 1);
    const auto b = sample_paths(KernelSpec::fbm(0.75), 0.01, 150, 2, 2);
    DrivePath c = a;
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < c.values[k].size(); ++i) c.values[k][i] = 2.5 * a.values[k][i] - 0.7 * b.values[k][i];
    const auto grid = uniform_grid(1.0, 50);
    const auto ra = regularize(a, 0.03, grid), rb = regularize(b, 0.03, grid), rc = regularize(c, 0.03, grid);
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < grid.size(); ++i)
            CHECK(std::abs(rc.g_values[k][i] - (2.5 * ra.g_values[k][i] - 0.7 * rb.g_values[k][i])) <= 1e-12);
}

TEST_CASE("regularized drive approaches the path as eps shrinks") {
    const double dt = 1e-3;
    const auto p = injected(dt, 1200, [](double s) { return std::sin(s); });
    double prev = 1e300;
    for (double eps : {0.1, 0.03, 0.01, dt}) {
        const auto d = regularize(p, eps, {0.0, 0.5, 1.0});
        const double err = std::max(std::abs(d.g_values[0][1] - std::sin(0.5)), std::abs(d.g_values[0][2] - std::sin(1.0)));
        CAPTURE(eps);
        CHECK(err < prev);
        prev = err;
    }
    CHECK(prev <= 1e-3);
}

TEST_CASE("regularized drive is Lipschitz with the a posteriori constant") {
    const auto p = sample_paths(KernelSpec::fbm(0.75), 0.005, 240, 1, 8);
    const double eps = 0.02;
    const auto grid = uniform_grid(1.0, 200);
    const auto d = regularize(p, eps, grid);
    double bound = 0.0;
    for (double s = 0.0; s <= 1.0 + 1e-12; s += 0.005)
        bound = std::max(bound, std::abs(p.value_at(0, s + eps) - p.value_at(0, std::max(s - eps, 0.0))) / (2.0 * eps));
    for (std::size_t i = 1; i < grid.size(); ++i)
        CHECK(std::abs(d.g_values[0][i] - d.g_values[0][i - 1]) <= (grid[i] - grid[i - 1]) * bound * (1.0 + 1e-12));
}

TEST_CASE("regularize refuses unresolved windows and horizon overruns") {
    const auto p = injected(0.01, 100, [](double s) { return s; });
    CHECK_THROWS_AS(regularize(p, 0.005, {0.0, 0.5}), DomainError);
    CHECK_THROWS_AS(regularize(p, 0.05, {0.0, 0.99}), RangeError);
    try {
        regularize(p, 0.05, {0.0, 0.99});
    } catch (const RangeError& e) {
        CHECK(std::string(e.what()).find("need 1.04") != std::string::npos);
    }
    CHECK_NOTHROW(regularize(p, 0.05, {0.0, 0.95}));
}

TEST_CASE("path dump has one record per component") {
    const auto p = sample_paths(KernelSpec::brownian(), 0.1, 5, 2, 4);
    const auto s = path_to_ndjson(p);
    CHECK(std::count(s.begin(), s.end(), '\n') == 2);
    CHECK(s.find("\"seed\":4") != std::string::npos);
}
