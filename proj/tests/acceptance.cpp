// Acceptance suite: one PASS/FAIL line per criterion, with runtime. The
// runtime limits are part of each criterion. Exit status is nonzero if any
// criterion fails.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/quadrature/tanh_sinh.hpp>

#include "stochtransport/cli.hpp"
#include "stochtransport/ensemble.hpp"
#include "stochtransport/kernel.hpp"
#include "stochtransport/moments.hpp"
#include "stochtransport/sampler.hpp"
#include "stochtransport/twoscale.hpp"
#include "stochtransport/veps.hpp"
#include "support.hpp"

using namespace stochtransport;
namespace fs = std::filesystem;

namespace {

struct Result {
    bool pass = true;
    std::string detail;
};

// Collects named sub-checks; the detail lists the worst margin and any failures.
class Tally {
public:
    void check(bool ok, const std::string& what) {
        ++n_;
        if (!ok) {
            pass_ = false;
            if (failures_.size() < 6) failures_.push_back(what);
        }
    }
    void note(const std::string& s) { notes_.push_back(s); }
    Result result() const {
        std::ostringstream os;
        os << n_ << " checks";
        for (const auto& s : notes_) os << "; " << s;
        for (const auto& f : failures_) os << "; FAILED " << f;
        return {pass_, os.str()};
    }

private:
    bool pass_ = true;
    int n_ = 0;
    std::vector<std::string> notes_, failures_;
};

std::string num(double x) {
    std::ostringstream os;
    os.precision(3);
    os << x;
    return os.str();
}

std::vector<double> uniform_grid(double t_max, std::size_t n) {
    std::vector<double> t(n + 1);
    for (std::size_t i = 0; i <= n; ++i) t[i] = t_max * static_cast<double>(i) / static_cast<double>(n);
    return t;
}

SpectralProblem spectral(double kappa, std::vector<Vec2> sigmas, double xi_max = 8.0, double dnu = 1.0 / 16.0) {
    SpectralProblem p;
    p.kappa = kappa;
    p.sigmas = std::move(sigmas);
    p.theta0 = InitialDatum::gaussian(1.0);
    p.lattice = FrequencyLattice::from_extent(xi_max, dnu);
    return p;
}

double integrate(const std::function<double(double)>& f, double a, double b) {
    static boost::math::quadrature::tanh_sinh<double> ts;
    return ts.integrate(f, a, b, 1e-14);
}

// Endpoints of two random intervals [a, b] and [c, d] in [0, 2].
template <class U, class R>
std::array<double, 4> intervals(U& u, R& rng) {
    double a = 2.0 * u(rng), b = 2.0 * u(rng), c = 2.0 * u(rng), d = 2.0 * u(rng);
    if (a > b) std::swap(a, b);
    if (c > d) std::swap(c, d);
    return {a, b, c, d};
}

// Absolute below one, relative above.
bool close(double got, double want, double tol) { return std::abs(got - want) <= tol * std::max(1.0, std::abs(want)); }

// ---------------------------------------------------------------------------

Result kernel_oracles() {
    Tally t;
    std::mt19937_64 rng(20240601);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double tol = 1e-8;
    double worst = 0.0;
    auto cmp = [&](double got, double want, const std::string& what) {
        worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
        t.check(close(got, want, tol), what);
    };
    // gamma, cov_R and increment_cov all follow from gamma via stationarity.
    auto family = [&](const KernelSpec& k, const std::function<double(double)>& g,
                      const std::function<double(double)>& dg, const std::string& name) {
        for (int i = 0; i < 50; ++i) {
            const auto [a, b, c, d] = intervals(u, rng);
            const double s = 0.05 + 1.95 * u(rng);
            cmp(gamma(k, s), g(s), name + " gamma");
            cmp(dgamma(k, s), dg(s), name + " dgamma");
            cmp(gamma(k, s), integrate([&](double x) { return dgamma(k, x); }, 0.0, s), name + " gamma = int dgamma");
            cmp(cov_R(k, a, b), 0.5 * (g(a) + g(b) - g(std::abs(a - b))), name + " cov_R");
            cmp(increment_cov(k, a, b, c, d),
                0.5 * (g(std::abs(b - c)) + g(std::abs(a - d)) - g(std::abs(b - d)) - g(std::abs(a - c))),
                name + " increment_cov");
        }
    };
    family(KernelSpec::brownian(), [](double s) { return s; }, [](double) { return 1.0; }, "bm");
    for (int i = 0; i < 50; ++i) {
        const double h = 0.1 + 0.85 * u(rng);
        const KernelSpec k = KernelSpec::fbm(h);
        const double s = 0.05 + 1.95 * u(rng);
        const auto [a, b, c, d] = intervals(u, rng);
        auto g = [h](double x) { return testsupport::fbm_gamma(h, x); };
        cmp(gamma(k, s), g(s), "fbm gamma");
        cmp(dgamma(k, s), 2.0 * h * std::pow(s, 2.0 * h - 1.0), "fbm dgamma");
        cmp(gamma(k, s), integrate([&](double x) { return dgamma(k, x); }, 0.0, s), "fbm gamma = int dgamma");
        cmp(cov_R(k, a, b), 0.5 * (g(a) + g(b) - g(std::abs(a - b))), "fbm cov_R");
        cmp(increment_cov(k, a, b, c, d),
            0.5 * (g(std::abs(b - c)) + g(std::abs(a - d)) - g(std::abs(b - d)) - g(std::abs(a - c))),
            "fbm increment_cov");
    }
    for (int i = 0; i < 50; ++i) {
        const double h = 0.55 + 0.4 * u(rng), lambda = 0.2 + 4.8 * u(rng), alpha = 0.5 + 1.5 * u(rng);
        const KernelSpec k = KernelSpec::damped_fbm(h, lambda, alpha);
        const double s = 0.05 + 1.95 * u(rng);
        const auto [a, b, c, d] = intervals(u, rng);
        auto g = [&](double x) { return testsupport::damped_gamma(h, lambda, alpha, x); };
        // Brute force straight from the defining integral.
        const double brute = integrate(
            [&](double v) { return 2.0 * alpha * (s - v) * std::pow(v, 2.0 * h - 2.0) * std::exp(-lambda * v); }, 0.0, s);
        const double brute_d = integrate(
            [&](double v) { return 2.0 * alpha * std::pow(v, 2.0 * h - 2.0) * std::exp(-lambda * v); }, 0.0, s);
        cmp(gamma(k, s), g(s), "damped gamma");
        cmp(gamma(k, s), brute, "damped gamma brute force");
        cmp(dgamma(k, s), testsupport::damped_dgamma(h, lambda, alpha, s), "damped dgamma");
        cmp(dgamma(k, s), brute_d, "damped dgamma brute force");
        cmp(cov_R(k, a, b), 0.5 * (g(a) + g(b) - g(std::abs(a - b))), "damped cov_R");
        cmp(increment_cov(k, a, b, c, d),
            0.5 * (g(std::abs(b - c)) + g(std::abs(a - d)) - g(std::abs(b - d)) - g(std::abs(a - c))),
            "damped increment_cov");
    }
    // A monotone cubic reproduces a linear table exactly.
    std::vector<double> grid = {0.0}, values = {0.0};
    while (grid.back() < 2.5) grid.push_back(grid.back() + 0.02 + 0.2 * u(rng));
    for (std::size_t i = 1; i < grid.size(); ++i) values.push_back(0.7 * grid[i]);
    family(KernelSpec::tabulated(grid, values), [](double s) { return 0.7 * s; }, [](double) { return 0.7; },
           "tabulated");
    t.note("worst error " + num(worst));
    return t.result();
}

Result veps_convergence() {
    Tally t;
    const std::vector<double> eps = {0.1, 0.05, 0.025};
    const auto grid = uniform_grid(1.0, 200);
    for (const auto& k : {KernelSpec::brownian(), KernelSpec::fbm(0.75)}) {
        double prev = 1e300;
        std::string line = k.describe() + " sup";
        for (double e : eps) {
            const double r = veps_cumulative(k, e, grid).sup_residual(0.1, 1.0);
            t.check(r < prev, k.describe() + " monotone at eps " + num(e));
            prev = r;
            line += " " + num(r);
        }
        t.check(prev <= 0.01, k.describe() + " residual at eps 0.025");
        t.note(line);
    }
    double plateau = 0.0;
    for (double e : eps) {
        const auto c = veps_cumulative(KernelSpec::brownian(), e, uniform_grid(1.0, 400));
        for (std::size_t i = 0; i < c.t_grid.size(); ++i)
            if (c.t_grid[i] >= 2.0 * e) plateau = std::max(plateau, std::abs(c.vdot[i] - 0.5));
    }
    t.check(plateau <= 1e-10, "Brownian plateau");
    t.note("plateau error " + num(plateau));
    return t.result();
}

Result variance_identity() {
    Tally t;
    const std::vector<double> times = {0.0, 0.02, 0.1, 0.25, 0.5, 1.0};
    double worst = 0.0;
    for (double h : {0.5, 0.75, 0.3, 0.9})
        for (double e : {0.1, 0.05, 0.025}) {
            const auto k = h == 0.5 ? KernelSpec::brownian() : KernelSpec::fbm(h);
            const auto c = veps_cumulative(k, e, times);
            for (std::size_t i = 1; i < times.size(); ++i) {
                const double d = std::abs(2.0 * c.v[i] - testsupport::fbm_regularized_variance(h, e, times[i]));
                worst = std::max(worst, d);
                t.check(d <= 1e-8, "analytic H=" + num(h) + " eps=" + num(e) + " t=" + num(times[i]));
            }
        }
    t.note("analytic worst " + num(worst));

    const double e = 0.05, dt = 0.005;
    const std::vector<double> obs = {0.25, 0.5, 1.0};
    double zmax = 0.0;
    for (const auto& k : {KernelSpec::brownian(), KernelSpec::fbm(0.75)}) {
        const PathSampler s(k, dt, 220);
        std::vector<RealMoments> m(obs.size());
        for (std::uint64_t r = 0; r < 20000; ++r) {
            const auto d = regularize(s.sample(1, 31, r), e, obs);
            for (std::size_t i = 0; i < obs.size(); ++i) m[i].add(d.g_values[0][i]);
        }
        const auto c = veps_cumulative(k, e, {0.0, 0.25, 0.5, 1.0});
        for (std::size_t i = 0; i < obs.size(); ++i) {
            const double z = std::abs(m[i].variance() - 2.0 * c.v[i + 1]) / m[i].variance_standard_error();
            zmax = std::max(zmax, z);
            t.check(z <= 3.0, k.describe() + " MC at t=" + num(obs[i]));
        }
    }
    t.note("MC max |z| " + num(zmax));
    return t.result();
}

Result mean_field() {
    Tally t;
    const SpectralProblem p = spectral(0.05, {{1.0, 0.0}, {0.0, 0.5}});
    double zmax = 0.0;
    for (const auto& k : {KernelSpec::brownian(), KernelSpec::fbm(0.75)}) {
        EnsembleConfig cfg;
        cfg.epsilon = 0.01;
        cfg.dt = 0.01;
        cfg.n_replicas = 20000;
        cfg.seed = 41;
        cfg.times = {0.25, 1.0};
        cfg.xis = {{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}};
        const auto s = run_ensemble(p, k, cfg);
        for (std::size_t ti = 0; ti < s.times.size(); ++ti)
            for (std::size_t x = 0; x < s.xis.size(); ++x) {
                const Vec2 xi = s.xis[x];
                const Complex want = p.theta0_hat(xi) * std::exp(-p.kappa * norm2(xi) * s.times[ti] -
                                                                 0.5 * p.sigma2(xi) * gamma(k, s.times[ti]));
                const double z = std::abs(s.mean(ti, x) - want) / s.standard_error(ti, x);
                zmax = std::max(zmax, z);
                t.check(z <= 3.0, k.describe() + " t=" + num(s.times[ti]) + " xi=(" + num(xi[0]) + "," + num(xi[1]) + ")");
            }
    }
    t.note("max |z| " + num(zmax));
    return t.result();
}

Result covariance() {
    Tally t;
    const SpectralProblem p = spectral(0.02, {{1.0, 0.0}, {0.0, 0.5}});
    const std::vector<std::pair<Vec2, Vec2>> pairs = {{{1.0, 0.0}, {1.0, 0.0}}, {{1.0, 0.0}, {0.0, 1.0}},
                                                      {{1.0, 1.0}, {1.0, 0.0}}, {{2.0, 0.0}, {1.0, 1.0}},
                                                      {{0.0, 1.0}, {1.0, -1.0}}};
    const auto grid = uniform_grid(1.0, 1000);
    double worst = 0.0;
    for (const auto& k : {KernelSpec::brownian(), KernelSpec::fbm(0.75)})
        for (const auto& [x, y] : pairs) {
            const auto c = cov_ode(p, k, grid, x, y);
            for (std::size_t i = 0; i < grid.size(); ++i)
                worst = std::max(worst, std::abs(c.values[i] - cov_closed(p, k, grid[i], x, y)));
        }
    t.check(worst <= 1e-8, "cov_ode against cov_closed");
    t.note("ODE worst " + num(worst));

    const auto k = KernelSpec::fbm(0.75);
    EnsembleConfig cfg;
    cfg.epsilon = 0.002;
    cfg.dt = 0.002;
    cfg.n_replicas = 20000;
    cfg.seed = 43;
    cfg.times = {0.5, 1.0};
    cfg.xis = {{1.0, 0.0}};
    cfg.pairs = pairs;
    const auto s = run_ensemble(p, k, cfg);
    double zmax = 0.0;
    for (std::size_t ti = 0; ti < s.times.size(); ++ti)
        for (std::size_t q = 0; q < s.pairs.size(); ++q) {
            const auto [x, y] = s.pairs[q];
            const Complex want = cov_closed(p, k, s.times[ti], x, y);
            const double se = s.covariance_standard_error(ti, q);
            const double z = se > 0.0 ? std::abs(s.covariance(ti, q) - want) / se : 0.0;
            zmax = std::max(zmax, z);
            t.check(se > 0.0 && z <= 3.0, "MC pair " + std::to_string(q) + " t=" + num(s.times[ti]));
        }
    t.note("MC max |z| " + num(zmax));
    return t.result();
}

Result exponents() {
    Tally t;
    const SpectralProblem p = spectral(0.0, {{0.3, 0.0}});
    std::vector<double> ts;
    for (int i = 0; i <= 20; ++i) ts.push_back(std::pow(10.0, -3.0 + 2.0 * i / 20.0));
    for (double h : {0.5, 0.75, 0.9}) {
        const auto k = h == 0.5 ? KernelSpec::brownian() : KernelSpec::fbm(h);
        const auto e = smalltime_exponents(p, k, ts);
        t.check(std::abs(e.slope_mean - 2.0 * h) <= 0.05, "mean slope H=" + num(h));
        t.check(std::abs(e.slope_sd - h) <= 0.05, "sd slope H=" + num(h));
        t.note("H=" + num(h) + " slopes " + num(e.slope_mean) + ", " + num(e.slope_sd));
    }
    return t.result();
}

Result variance_field() {
    Tally t;
    const auto k = KernelSpec::fbm(0.75);
    const double time = 0.25;
    const SpectralProblem p = spectral(0.0, {{0.5, 0.0}}, 8.0, 0.125);
    const PairLattice pl{4.0, 0.125};
    const double residual = variance_pde_residual(p, k, time, pl);
    t.check(residual <= 1e-6, "PDE residual");
    t.note("residual " + num(residual));

    const auto exact = variance_physical(p, k, time, pl);
    const auto est = mc_variance_field(p, k, 0.002, 0.002, 20000, time, 47);
    t.check(est.variance.n == exact.n, "grids agree");
    double worst = 0.0, se = 0.0;
    for (std::size_t i = 0; i < exact.values.size(); ++i) {
        worst = std::max(worst, std::abs(est.variance.values[i] - exact.values[i]));
        se = std::max(se, est.standard_error.values[i]);
    }
    const double budget = variance_truncation_bound(p, pl);
    t.check(worst <= 3.0 * se + budget, "sup distance to the Monte Carlo field");
    t.note("sup distance " + num(worst) + " vs 3 SE " + num(3.0 * se) + " + truncation " + num(budget));
    return t.result();
}

Result two_scale() {
    Tally t;
    std::vector<double> lhs;
    for (int N : {4, 8, 16}) {
        TorusProblem tp;
        tp.n = 64;
        tp.kappa = 0.0;
        tp.kappa_T = 0.01;
        tp.small = SmallScaleFamily::shell(N, tp.kappa_T);
        tp.sigmas = {{0.3, 0.0}, {0.0, 0.3}};
        tp.kernel = KernelSpec::fbm(0.75);
        tp.epsilon = 0.01;
        tp.dt = 1e-3;
        tp.horizon = 0.25;
        tp.theta0 = {{{1, 0}, 1.0, 0.0}, {{0, 1}, 0.5, 0.3}};
        tp.phi = {{{1, 0}, 1.0, 0.0}, {{0, 1}, 1.0, 0.0}};
        BoundCheckConfig cfg;
        cfg.n_replicas = 200;
        cfg.seed = 1;
        const auto b = theorem_bound_check(tp, cfg);
        t.check(b.pass && b.lhs <= b.rhs + 3.0 * b.lhs_se + b.budget, "bound at N=" + std::to_string(N));
        t.note("N=" + std::to_string(N) + " lhs " + num(b.lhs) + " rhs " + num(b.rhs) + " se " + num(b.lhs_se) +
               " budget " + num(b.budget));
        lhs.push_back(b.lhs);
    }
    for (std::size_t i = 1; i < lhs.size(); ++i) {
        const double ratio = lhs[i - 1] / lhs[i];
        t.check(ratio >= 1.5, "decay ratio " + std::to_string(i));
        t.note("ratio " + num(ratio));
    }
    return t.result();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

Result determinism() {
    using cli::json;
    Tally t;
    const fs::path root = fs::temp_directory_path() / "stochtransport_acceptance_determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    const json small_problem = {{"kappa", 0.01}, {"sigmas", {{1.0, 0.0}}}};
    const std::vector<json> configs = {
        {{"experiment", "veps"}, {"kernel", {{"type", "fbm"}, {"hurst", 0.75}}}},
        {{"experiment", "mean"},
         {"kernel", {{"type", "fbm"}, {"hurst", 0.75}}},
         {"problem", small_problem},
         {"mean", {{"epsilons", {0.1, 0.05}}, {"dt", 0.01}}}},
        {{"experiment", "covariance"}, {"kernel", {{"type", "bm"}}}, {"problem", small_problem}},
        {{"experiment", "asymptotics"}, {"kernel", {{"type", "fbm"}, {"hurst", 0.75}}}, {"problem", {{"sigmas", {{0.3, 0.0}}}}}},
        {{"experiment", "ensemble"},
         {"seed", 5},
         {"kernel", {{"type", "fbm"}, {"hurst", 0.75}}},
         {"problem", small_problem},
         {"ensemble", {{"replicas", 200}, {"dt", 0.01}}}},
        {{"experiment", "twoscale"},
         {"seed", 6},
         {"kernel", {{"type", "fbm"}, {"hurst", 0.75}}},
         {"problem", {{"sigmas", {{0.3, 0.0}, {0.0, 0.3}}}}},
         {"twoscale", {{"n", 32}, {"N", 4}, {"dt", 2e-3}, {"horizon", 0.05}, {"replicas", 16}}}}};
    for (const auto& c : configs) {
        const std::string exp = c["experiment"];
        const fs::path dir = root / exp;
        fs::create_directories(dir);
        std::ofstream(dir / "config.json") << c.dump(2);
        std::ostringstream log;
        cli::RunRequest first;
        first.config = dir / "config.json";
        first.out = dir / "first";
        const int a = cli::run(first, log);
        t.check(a == cli::kOk || a == cli::kCheckFailed, exp + " ran");
        cli::RunRequest again = first;
        again.config = dir / "first" / "manifest.json";
        again.out = dir / "again";
        again.workers = 2;
        const int b = cli::run(again, log);
        t.check(b == a, exp + " same exit code");
        const json manifest = json::parse(slurp(dir / "first" / "manifest.json"));
        std::size_t files = 0;
        for (const auto& [name, hash] : manifest["content_hashes"].items()) {
            const std::string x = slurp(dir / "first" / name), y = slurp(dir / "again" / name);
            t.check(!x.empty() && x == y, exp + "/" + name + " byte-identical");
            t.check(cli::git_blob_sha1(y) == hash.get<std::string>(), exp + "/" + name + " hash");
            ++files;
        }
        t.note(exp + " " + std::to_string(files) + " files");
    }
    fs::remove_all(root);
    return t.result();
}

Result damped_plateau() {
    Tally t;
    double worst = 0.0;
    for (const auto& [h, lambda, alpha] : {std::tuple{0.75, 1.0, 1.0}, std::tuple{0.6, 0.5, 2.0},
                                           std::tuple{0.9, 3.0, 0.7}, std::tuple{0.55, 10.0, 1.0}}) {
        const double plateau = 2.0 * alpha * std::tgamma(2.0 * h - 1.0) * std::pow(lambda, -(2.0 * h - 1.0));
        const double got = dgamma(KernelSpec::damped_fbm(h, lambda, alpha), 20.0 / lambda);
        const double rel = std::abs(got - plateau) / plateau;
        worst = std::max(worst, rel);
        t.check(rel <= 1e-4, "H=" + num(h) + " lambda=" + num(lambda));
    }
    t.note("worst relative error " + num(worst));
    return t.result();
}

struct Criterion {
    int id;
    const char* name;
    double limit_seconds;
    Result (*run)();
};

}  // namespace

int main() {
    const Criterion criteria[] = {
        {1, "kernel and quadrature oracles", 10.0, kernel_oracles},
        {2, "V_eps converges to gamma / 2", 60.0, veps_convergence},
        {3, "variance identity Var = 2 V_eps", 120.0, variance_identity},
        {4, "ensemble mean against the closed form", 180.0, mean_field},
        {5, "covariance by ODE and Monte Carlo", 180.0, covariance},
        {6, "small-time exponents (2H, H)", 60.0, exponents},
        {7, "physical-space variance field", 300.0, variance_field},
        {8, "two-scale reduction bound", 900.0, two_scale},
        {9, "re-runs from manifests are byte-identical", 600.0, determinism},
        {10, "damped kernel long-time plateau", 1.0, damped_plateau},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Result r;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            r = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = secs <= c.limit_seconds;
        const bool pass = r.pass && in_time;
        failed += !pass;
        std::printf("criterion %2d %s  %s  [%.2f s, limit %.0f s%s]  %s\n", c.id, pass ? "PASS" : "FAIL", c.name, secs,
                    c.limit_seconds, in_time ? "" : ", OVER TIME", r.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of 10 criteria passed\n", 10 - failed);
    return failed == 0 ? 0 : 1;
}
