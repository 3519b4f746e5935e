#include "stochtransport/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "stochtransport/ensemble.hpp"
#include "stochtransport/errors.hpp"
#include "stochtransport/kernel.hpp"
#include "stochtransport/moments.hpp"
#include "stochtransport/sampler.hpp"
#include "stochtransport/spectral.hpp"
#include "stochtransport/twoscale.hpp"
#include "stochtransport/veps.hpp"

namespace stochtransport::cli {

namespace {

constexpr const char* kExperiments[] = {"veps", "mean", "covariance", "asymptotics", "ensemble", "twoscale"};

// ---------------------------------------------------------------------------
// Strict reading of JSON objects: every key must be consumed.

class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_, "expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    double number(const std::string& key, std::optional<double> def = std::nullopt) {
        if (!has(key)) return need(key, def);
        const json& v = raw(key);
        if (!v.is_number()) throw ConfigError(at(key), "expected a number");
        const double x = v.get<double>();
        if (!std::isfinite(x)) throw ConfigError(at(key), "must be finite");
        return x;
    }

    double positive(const std::string& key, std::optional<double> def = std::nullopt) {
        const double x = number(key, def);
        if (!(x > 0.0)) throw ConfigError(at(key), "must be positive");
        return x;
    }

    std::uint64_t count(const std::string& key, std::optional<std::uint64_t> def = std::nullopt) {
        if (!has(key)) return need(key, def);
        const json& v = raw(key);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
            throw ConfigError(at(key), "expected a non-negative integer");
        return v.get<std::uint64_t>();
    }

    std::string text(const std::string& key, std::optional<std::string> def = std::nullopt) {
        if (!has(key)) return need(key, def);
        const json& v = raw(key);
        if (!v.is_string()) throw ConfigError(at(key), "expected a string");
        return v.get<std::string>();
    }

    std::vector<double> numbers(const std::string& key, std::optional<std::vector<double>> def = std::nullopt) {
        if (!has(key)) return need(key, def);
        const json& v = raw(key);
        if (!v.is_array()) throw ConfigError(at(key), "expected an array of numbers");
        std::vector<double> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!v[i].is_number()) throw ConfigError(at(key) + "[" + std::to_string(i) + "]", "expected a number");
            out.push_back(v[i].get<double>());
        }
        return out;
    }

    std::vector<Vec2> vectors(const std::string& key, std::optional<std::vector<Vec2>> def = std::nullopt) {
        if (!has(key)) return need(key, def);
        const json& v = raw(key);
        if (!v.is_array()) throw ConfigError(at(key), "expected an array of [x, y] pairs");
        std::vector<Vec2> out;
        for (std::size_t i = 0; i < v.size(); ++i) out.push_back(vec2(v[i], at(key) + "[" + std::to_string(i) + "]"));
        return out;
    }

    std::vector<std::pair<Vec2, Vec2>> vector_pairs(const std::string& key,
                                                    std::optional<std::vector<std::pair<Vec2, Vec2>>> def) {
        if (!has(key)) return need(key, def);
        const json& v = raw(key);
        if (!v.is_array()) throw ConfigError(at(key), "expected an array of [[x, y], [u, v]] pairs");
        std::vector<std::pair<Vec2, Vec2>> out;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const std::string p = at(key) + "[" + std::to_string(i) + "]";
            if (!v[i].is_array() || v[i].size() != 2) throw ConfigError(p, "expected [[x, y], [u, v]]");
            out.emplace_back(vec2(v[i][0], p + "[0]"), vec2(v[i][1], p + "[1]"));
        }
        return out;
    }

    void done() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(at(it.key()), "unknown key");
    }

    static Vec2 vec2(const json& v, const std::string& path) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
            throw ConfigError(path, "expected [x, y]");
        return {v[0].get<double>(), v[1].get<double>()};
    }

private:
    template <class T>
    T need(const std::string& key, const std::optional<T>& def) const {
        if (!def) throw ConfigError(at(key), "required field missing");
        return *def;
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

json to_json(const Vec2& v) { return json::array({v[0], v[1]}); }

json to_json(const std::vector<Vec2>& vs) {
    json a = json::array();
    for (const auto& v : vs) a.push_back(to_json(v));
    return a;
}

json to_json(const std::vector<std::pair<Vec2, Vec2>>& ps) {
    json a = json::array();
    for (const auto& [x, y] : ps) a.push_back(json::array({to_json(x), to_json(y)}));
    return a;
}

void require_sorted(const std::vector<double>& v, const std::string& path, bool allow_zero) {
    if (v.empty()) throw ConfigError(path, "must not be empty");
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] < 0.0 || (!allow_zero && v[i] == 0.0))
            throw ConfigError(path + "[" + std::to_string(i) + "]", allow_zero ? "must be >= 0" : "must be > 0");
        if (i > 0 && !(v[i] > v[i - 1])) throw ConfigError(path, "must be strictly increasing");
    }
}

// ---------------------------------------------------------------------------
// Configuration blocks. Each parse_* validates a raw block and returns the
// resolved JSON with all defaults.

json parse_kernel(const json& root) {
    if (!root.contains("kernel")) throw ConfigError("kernel", "required block missing");
    Reader r(root.at("kernel"), "kernel");
    const std::string type = r.text("type");
    json out{{"type", type}};
    try {
        if (type == "bm") {
        } else if (type == "fbm") {
            out["hurst"] = r.number("hurst");
            KernelSpec::fbm(out["hurst"].get<double>());
        } else if (type == "damped_fbm") {
            out["hurst"] = r.number("hurst");
            out["lambda"] = r.number("lambda");
            out["alpha"] = r.number("alpha", 1.0);
            KernelSpec::damped_fbm(out["hurst"], out["lambda"], out["alpha"]);
        } else if (type == "tabulated") {
            out["grid"] = r.numbers("grid");
            out["values"] = r.numbers("values");
            KernelSpec::tabulated(out["grid"], out["values"]);
        } else {
            throw ConfigError("kernel.type", "expected one of bm, fbm, damped_fbm, tabulated");
        }
    } catch (const DomainError& e) {
        throw ConfigError("kernel", e.what());
    }
    r.done();
    return out;
}

KernelSpec make_kernel(const json& k) {
    const std::string type = k.at("type");
    if (type == "bm") return KernelSpec::brownian();
    if (type == "fbm") return KernelSpec::fbm(k.at("hurst"));
    if (type == "damped_fbm") return KernelSpec::damped_fbm(k.at("hurst"), k.at("lambda"), k.at("alpha"));
    return KernelSpec::tabulated(k.at("grid"), k.at("values"));
}

// Hurst index when the kernel has exact power-law variance.
std::optional<double> power_law_hurst(const json& k) {
    if (k.at("type") == "bm") return 0.5;
    if (k.at("type") == "fbm") return k.at("hurst").get<double>();
    return std::nullopt;
}

json parse_problem(const json& root) {
    const json empty = json::object();
    Reader r(root.contains("problem") ? root.at("problem") : empty, "problem");
    json out;
    out["kappa"] = r.number("kappa", 0.0);
    if (out["kappa"].get<double>() < 0.0) throw ConfigError("problem.kappa", "must be >= 0");
    out["sigmas"] = to_json(r.vectors("sigmas", std::vector<Vec2>{{1.0, 0.0}}));
    out["gaussian_width"] = r.positive("gaussian_width", 1.0);
    out["xi_max"] = r.positive("xi_max", 8.0);
    out["dnu"] = r.positive("dnu", 1.0 / 16.0);
    r.done();
    return out;
}

SpectralProblem make_problem(const json& pj) {
    SpectralProblem p;
    p.kappa = pj.at("kappa");
    for (const auto& s : pj.at("sigmas")) p.sigmas.push_back({s[0].get<double>(), s[1].get<double>()});
    p.theta0 = InitialDatum::gaussian(pj.at("gaussian_width"));
    p.lattice = FrequencyLattice::from_extent(pj.at("xi_max"), pj.at("dnu"));
    return p;
}

const std::vector<Vec2> kDefaultXis{{1.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}};
const std::vector<std::pair<Vec2, Vec2>> kDefaultPairs{
    {{1.0, 0.0}, {1.0, 0.0}}, {{1.0, 0.0}, {0.0, 1.0}}, {{1.0, 1.0}, {1.0, 0.0}},
    {{2.0, 0.0}, {1.0, 1.0}}, {{0.0, 1.0}, {1.0, -1.0}}};

json parse_modes(Reader& r, const std::string& key, const std::vector<CosineMode>& def) {
    json out = json::array();
    if (!r.has(key)) {
        for (const auto& m : def)
            out.push_back({{"m", json::array({m.m[0], m.m[1]})}, {"amplitude", m.amplitude}, {"phase", m.phase}});
        return out;
    }
    const json& v = r.raw(key);
    if (!v.is_array()) throw ConfigError(r.at(key), "expected an array of modes");
    for (std::size_t i = 0; i < v.size(); ++i) {
        Reader mr(v[i], r.at(key) + "[" + std::to_string(i) + "]");
        const json& m = mr.raw("m");
        if (!m.is_array() || m.size() != 2 || !m[0].is_number_integer() || !m[1].is_number_integer())
            throw ConfigError(mr.at("m"), "expected two integers");
        out.push_back({{"m", m}, {"amplitude", mr.number("amplitude", 1.0)}, {"phase", mr.number("phase", 0.0)}});
        mr.done();
    }
    return out;
}

std::vector<CosineMode> make_modes(const json& a) {
    std::vector<CosineMode> out;
    for (const auto& m : a) out.push_back({{m["m"][0].get<int>(), m["m"][1].get<int>()}, m["amplitude"], m["phase"]});
    return out;
}

json parse_block(const std::string& exp, const json& root) {
    const json empty = json::object();
    Reader r(root.contains(exp) ? root.at(exp) : empty, exp);
    json out;
    if (exp == "veps") {
        out["epsilons"] = r.numbers("epsilons", std::vector<double>{0.1, 0.05, 0.025});
        out["t_max"] = r.positive("t_max", 1.0);
        out["dt"] = r.positive("dt", 0.01);
        out["window"] = r.numbers("window", std::vector<double>{0.1, 1.0});
        if (out["window"].size() != 2) throw ConfigError("veps.window", "expected [t_lo, t_hi]");
        for (double e : out["epsilons"]) if (!(e > 0.0)) throw ConfigError("veps.epsilons", "must be positive");
    } else if (exp == "mean") {
        out["xis"] = to_json(r.vectors("xis", kDefaultXis));
        out["epsilons"] = r.numbers("epsilons", std::vector<double>{0.1, 0.05, 0.025});
        out["dt"] = r.positive("dt", 1e-3);
        out["t_max"] = r.positive("t_max", 1.0);
        out["field_times"] = r.numbers("field_times", std::vector<double>{0.25, 1.0});
        for (double e : out["epsilons"]) if (!(e > 0.0)) throw ConfigError("mean.epsilons", "must be positive");
    } else if (exp == "covariance") {
        out["pairs"] = to_json(r.vector_pairs("pairs", kDefaultPairs));
        out["dt"] = r.positive("dt", 1e-3);
        out["t_max"] = r.positive("t_max", 1.0);
        out["variance_times"] = r.numbers("variance_times", std::vector<double>{0.25});
        out["pair_xi_max"] = r.positive("pair_xi_max", 4.0);
        out["pair_dnu"] = r.positive("pair_dnu", 0.25);
    } else if (exp == "asymptotics") {
        out["t_min"] = r.positive("t_min", 1e-3);
        out["t_max"] = r.positive("t_max", 1e-1);
        out["points"] = r.count("points", 21);
        if (out["points"].get<std::uint64_t>() < 3) throw ConfigError("asymptotics.points", "need at least 3");
        if (!(out["t_max"].get<double>() > out["t_min"].get<double>()))
            throw ConfigError("asymptotics.t_max", "must exceed t_min");
    } else if (exp == "ensemble") {
        out["epsilon"] = r.positive("epsilon", 0.01);
        out["dt"] = r.positive("dt", 1e-3);
        out["replicas"] = r.count("replicas", 2000);
        out["times"] = r.numbers("times", std::vector<double>{0.25, 1.0});
        out["xis"] = to_json(r.vectors("xis", kDefaultXis));
        out["pairs"] = to_json(r.vector_pairs("pairs", kDefaultPairs));
        // null (as written to manifests) means no variance comparison.
        if (r.has("variance_time") && !r.raw("variance_time").is_null()) {
            out["variance_time"] = r.number("variance_time");
        } else {
            out["variance_time"] = nullptr;
        }
        out["pair_xi_max"] = r.positive("pair_xi_max", 4.0);
        out["pair_dnu"] = r.positive("pair_dnu", 0.25);
        if (out["replicas"].get<std::uint64_t>() < 2) throw ConfigError("ensemble.replicas", "need at least 2");
        require_sorted(out["times"], "ensemble.times", true);
    } else if (exp == "twoscale") {
        out["n"] = r.count("n", 64);
        out["kappa_T"] = r.number("kappa_T", 0.01);
        out["N"] = r.count("N", 8);
        out["epsilon"] = r.positive("epsilon", 0.01);
        out["dt"] = r.positive("dt", 1e-3);
        out["horizon"] = r.positive("horizon", 0.25);
        out["theta0"] = parse_modes(r, "theta0", {{{1, 0}, 1.0, 0.0}, {{0, 1}, 0.5, 0.3}});
        out["phi"] = parse_modes(r, "phi", {{{1, 0}, 1.0, 0.0}, {{0, 1}, 1.0, 0.0}});
        out["replicas"] = r.count("replicas", 200);
        out["richardson_replicas"] = r.count("richardson_replicas", 8);
        out["dx_replicas"] = r.count("dx_replicas", 2);
        out["noise_levels"] = r.count("noise_levels", 2);
        out["cfl"] = r.positive("cfl", 1.0);
        if (out["kappa_T"].get<double>() < 0.0) throw ConfigError("twoscale.kappa_T", "must be >= 0");
        if (out["replicas"].get<std::uint64_t>() < 2) throw ConfigError("twoscale.replicas", "need at least 2");
    }
    r.done();
    return out;
}

// ---------------------------------------------------------------------------
// Output helpers.

struct Checks {
    json list = json::array();
    bool pass = true;

    void add(const std::string& name, double value, double threshold, bool ok) {
        list.push_back({{"name", name}, {"value", value}, {"threshold", threshold}, {"pass", ok}});
        pass = pass && ok;
    }
    void at_most(const std::string& name, double value, double threshold) {
        add(name, value, threshold, value <= threshold);
    }
};

// Shortest text that reads back to the same double.
std::string fmt(double x) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

std::vector<double> uniform_grid(double t_max, double dt) {
    const auto n = static_cast<std::size_t>(std::llround(t_max / dt));
    if (std::abs(static_cast<double>(n) * dt - t_max) > 1e-9 * t_max)
        throw ConfigError("dt", "t_max must be a multiple of dt");
    std::vector<double> g(n + 1);
    for (std::size_t i = 0; i <= n; ++i) g[i] = static_cast<double>(i) * dt;
    return g;
}

// ---------------------------------------------------------------------------
// Experiments.

void run_veps(const json& c, Outcome& o, Checks& ch, json& metrics) {
    const KernelSpec k = make_kernel(c["kernel"]);
    const json& b = c["veps"];
    const auto grid = uniform_grid(b["t_max"], b["dt"]);
    const double lo = b["window"][0], hi = b["window"][1];
    std::vector<double> eps = b["epsilons"];
    std::sort(eps.begin(), eps.end(), std::greater<>());

    std::vector<double> phi(grid);  // test function phi(t) = t
    std::ostringstream table;
    table << "epsilon,sup_residual_half,sup_residual_full,weak_star_residual,plateau_error\n";
    std::vector<double> sup, weak;
    double plateau_bm = 0.0;
    const bool bm = c["kernel"]["type"] == "bm";
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const auto curve = veps_cumulative(k, eps[i], grid);
        o.files["veps_eps" + std::to_string(i) + ".csv"] = veps_csv(curve);
        double full = 0.0, plateau = 0.0;
        for (std::size_t q = 0; q < grid.size(); ++q) {
            if (grid[q] >= lo - 1e-12 && grid[q] <= hi + 1e-12)
                full = std::max(full, std::abs(curve.v[q] - gamma(k, grid[q])));
            if (grid[q] >= 2.0 * eps[i] - 1e-12 && grid[q] > 0.0)
                plateau = std::max(plateau, std::abs(curve.vdot[q] - 0.5 * dgamma(k, grid[q])));
        }
        sup.push_back(curve.sup_residual(lo, hi));
        weak.push_back(weak_star_residual(curve, phi));
        if (bm) plateau_bm = std::max(plateau_bm, plateau);
        table << fmt(eps[i]) << ',' << fmt(sup.back()) << ',' << fmt(full) << ',' << fmt(weak.back()) << ','
              << fmt(plateau) << '\n';
    }
    o.files["veps_table.csv"] = table.str();
    o.table = "veps_table.csv";
    metrics["sup_residual_half"] = sup;
    metrics["weak_star_residual"] = weak;
    if (eps.size() >= 2) {
        // Count the halvings that fail to decrease the residual.
        int bad = 0, bad_w = 0;
        for (std::size_t i = 1; i < eps.size(); ++i) {
            bad += !(sup[i] < sup[i - 1]);
            bad_w += !(weak[i] < weak[i - 1]);
        }
        ch.at_most("sup_residual_monotone_violations", bad, 0);
        ch.at_most("weak_star_residual_monotone_violations", bad_w, 0);
    }
    if (bm) ch.at_most("bm_plateau", plateau_bm, 1e-10);
}

void run_mean(const json& c, Outcome& o, Checks& ch, json& metrics) {
    const KernelSpec k = make_kernel(c["kernel"]);
    const SpectralProblem p = make_problem(c["problem"]);
    p.validate();
    const json& b = c["mean"];
    const auto grid = uniform_grid(b["t_max"], b["dt"]);
    std::vector<double> eps = b["epsilons"];
    std::sort(eps.begin(), eps.end(), std::greater<>());
    std::vector<Vec2> xis;
    for (const auto& x : b["xis"]) xis.push_back({x[0].get<double>(), x[1].get<double>()});

    std::ostringstream modes, table;
    modes << "t,xi1,xi2,epsilon,re_rk4,im_rk4,re_exp,im_exp,re_closed,im_closed\n";
    table << "xi1,xi2,epsilon,max_error_vs_closed,ode_disagreement\n";
    double disagreement = 0.0, modulus_excess = 0.0;
    std::vector<std::vector<double>> err(xis.size());
    for (double e : eps) {
        const auto curve = veps_cumulative(k, e, grid);
        for (std::size_t x = 0; x < xis.size(); ++x) {
            const auto r = mean_ode(p, curve, xis[x]);
            disagreement = std::max(disagreement, r.max_disagreement);
            double m = 0.0;
            for (std::size_t q = 0; q < grid.size(); ++q) {
                const Complex cl = mean_closed(p, k, grid[q], xis[x]);
                m = std::max(m, std::abs(r.exponential.values[q] - cl));
                modulus_excess = std::max(modulus_excess, std::abs(cl) - std::abs(p.theta0_hat(xis[x])));
                modes << fmt(grid[q]) << ',' << fmt(xis[x][0]) << ',' << fmt(xis[x][1]) << ',' << fmt(e) << ','
                      << fmt(r.rk4.values[q].real()) << ',' << fmt(r.rk4.values[q].imag()) << ','
                      << fmt(r.exponential.values[q].real()) << ',' << fmt(r.exponential.values[q].imag()) << ','
                      << fmt(cl.real()) << ',' << fmt(cl.imag()) << '\n';
            }
            err[x].push_back(m);
            table << fmt(xis[x][0]) << ',' << fmt(xis[x][1]) << ',' << fmt(e) << ',' << fmt(m) << ','
                  << fmt(r.max_disagreement) << '\n';
        }
    }
    o.files["mean_modes.csv"] = modes.str();
    o.files["mean_table.csv"] = table.str();
    o.table = "mean_table.csv";
    ch.at_most("ode_vs_exponential", disagreement, 1e-10);
    ch.at_most("modulus_bound", modulus_excess, 0.0);
    if (eps.size() >= 2) {
        int bad = 0;
        for (const auto& e : err)
            for (std::size_t i = 1; i < e.size(); ++i) bad += !(e[i] < e[i - 1]);
        ch.at_most("epsilon_convergence_violations", bad, 0);
    }
    double residual = 0.0;
    std::size_t fi = 0;
    for (double t : b["field_times"]) {
        o.files["mean_field_t" + std::to_string(fi++) + ".csv"] = field_csv(mean_physical(p, k, t));
        if (t > 2e-4) residual = std::max(residual, mean_pde_residual(p, k, t));
    }
    ch.at_most("mean_pde_residual", residual, 1e-8);
    metrics["ode_disagreement"] = disagreement;
}

void run_covariance(const json& c, Outcome& o, Checks& ch, json& metrics) {
    const KernelSpec k = make_kernel(c["kernel"]);
    const SpectralProblem p = make_problem(c["problem"]);
    p.validate();
    const json& b = c["covariance"];
    const auto grid = uniform_grid(b["t_max"], b["dt"]);

    std::ostringstream modes, table;
    modes << "t,xi1,xi2,eta1,eta2,re_ode,im_ode,re_closed,im_closed,abs_err\n";
    table << "xi1,xi2,eta1,eta2,max_abs_err\n";
    double worst = 0.0, herm = 0.0, second = 0.0;
    for (const auto& pr : b["pairs"]) {
        const Vec2 xi{pr[0][0].get<double>(), pr[0][1].get<double>()};
        const Vec2 eta{pr[1][0].get<double>(), pr[1][1].get<double>()};
        const auto sol = cov_ode(p, k, grid, xi, eta);
        double m = 0.0;
        for (std::size_t q = 0; q < grid.size(); ++q) {
            const double t = grid[q];
            const Complex cl = cov_closed(p, k, t, xi, eta);
            const double e = std::abs(sol.values[q] - cl);
            m = std::max(m, e);
            herm = std::max(herm, std::abs(cov_closed(p, k, t, eta, xi) - std::conj(cl)));
            const double total = (cov_closed(p, k, t, xi, xi) + std::norm(mean_closed(p, k, t, xi))).real();
            second = std::max(second, std::abs(total - std::norm(p.theta0_hat(xi)) *
                                                           std::exp(-2.0 * p.kappa * norm2(xi) * t)));
            modes << fmt(t) << ',' << fmt(xi[0]) << ',' << fmt(xi[1]) << ',' << fmt(eta[0]) << ',' << fmt(eta[1])
                  << ',' << fmt(sol.values[q].real()) << ',' << fmt(sol.values[q].imag()) << ',' << fmt(cl.real())
                  << ',' << fmt(cl.imag()) << ',' << fmt(e) << '\n';
        }
        worst = std::max(worst, m);
        table << fmt(xi[0]) << ',' << fmt(xi[1]) << ',' << fmt(eta[0]) << ',' << fmt(eta[1]) << ',' << fmt(m) << '\n';
    }
    o.files["cov_modes.csv"] = modes.str();
    o.files["cov_table.csv"] = table.str();
    o.table = "cov_table.csv";
    ch.at_most("cov_ode_vs_closed", worst, 1e-8);
    ch.at_most("hermitian_symmetry", herm, 1e-12);
    ch.at_most("total_second_moment", second, 1e-12);

    PairLattice pl{b["pair_xi_max"], b["pair_dnu"]};
    double residual = 0.0;
    std::size_t fi = 0;
    for (double t : b["variance_times"]) {
        o.files["variance_field_t" + std::to_string(fi++) + ".csv"] = field_csv(variance_physical(p, k, t, pl));
        if (t > 2e-4) residual = std::max(residual, variance_pde_residual(p, k, t, pl));
    }
    ch.at_most("variance_pde_residual", residual, 1e-6);
    metrics["truncation_bound"] = variance_truncation_bound(p, pl);
}

void run_asymptotics(const json& c, Outcome& o, Checks& ch, json& metrics) {
    const KernelSpec k = make_kernel(c["kernel"]);
    const SpectralProblem p = make_problem(c["problem"]);
    p.validate();
    const json& b = c["asymptotics"];
    const double lo = b["t_min"], hi = b["t_max"];
    const auto n = b["points"].get<std::size_t>();
    std::vector<double> ts(n);
    for (std::size_t i = 0; i < n; ++i)
        ts[i] = lo * std::pow(hi / lo, static_cast<double>(i) / static_cast<double>(n - 1));
    const auto fit = smalltime_exponents(p, k, ts);
    const auto h = power_law_hurst(c["kernel"]);
    o.files["exponents.csv"] = exponent_table_csv({{h.value_or(std::nan("")), fit}});
    o.table = "exponents.csv";
    metrics["slope_mean"] = fit.slope_mean;
    metrics["slope_sd"] = fit.slope_sd;
    if (h) {
        ch.at_most("slope_mean_vs_2H", std::abs(fit.slope_mean - 2.0 * *h), 0.05);
        ch.at_most("slope_sd_vs_H", std::abs(fit.slope_sd - *h), 0.05);
    }
}

void run_ensemble_exp(const json& c, unsigned workers, bool emit_paths, Outcome& o, Checks& ch, json& metrics) {
    const KernelSpec k = make_kernel(c["kernel"]);
    const SpectralProblem p = make_problem(c["problem"]);
    p.validate();
    const json& b = c["ensemble"];
    EnsembleConfig cfg;
    cfg.epsilon = b["epsilon"];
    cfg.dt = b["dt"];
    cfg.n_replicas = b["replicas"];
    cfg.seed = c["seed"];
    cfg.workers = workers;
    cfg.times = b["times"].get<std::vector<double>>();
    for (const auto& x : b["xis"]) cfg.xis.push_back({x[0].get<double>(), x[1].get<double>()});
    for (const auto& pr : b["pairs"])
        cfg.pairs.push_back({{pr[0][0].get<double>(), pr[0][1].get<double>()},
                             {pr[1][0].get<double>(), pr[1][1].get<double>()}});

    const auto s = run_ensemble(p, k, cfg);
    std::vector<std::vector<Complex>> closed(cfg.times.size());
    double zmax = 0.0, czmax = 0.0;
    std::ostringstream cov;
    cov << "t,xi1,xi2,eta1,eta2,re_mc,im_mc,se,re_closed,im_closed,z_score\n";
    for (std::size_t ti = 0; ti < cfg.times.size(); ++ti) {
        for (std::size_t x = 0; x < cfg.xis.size(); ++x) {
            closed[ti].push_back(mean_closed(p, k, cfg.times[ti], cfg.xis[x]));
            const double se = s.standard_error(ti, x);
            const double d = std::abs(s.mean(ti, x) - closed[ti].back());
            zmax = std::max(zmax, se > 0.0 ? d / se : (d > 1e-12 ? INFINITY : 0.0));
        }
        for (std::size_t q = 0; q < cfg.pairs.size(); ++q) {
            const auto& [xi, eta] = cfg.pairs[q];
            const Complex cl = cov_closed(p, k, cfg.times[ti], xi, eta);
            const Complex mc = s.covariance(ti, q);
            const double se = s.covariance_standard_error(ti, q);
            const double d = std::abs(mc - cl);
            const double z = se > 0.0 ? d / se : (d > 1e-12 ? INFINITY : 0.0);
            czmax = std::max(czmax, z);
            cov << fmt(cfg.times[ti]) << ',' << fmt(xi[0]) << ',' << fmt(xi[1]) << ',' << fmt(eta[0]) << ','
                << fmt(eta[1]) << ',' << fmt(mc.real()) << ',' << fmt(mc.imag()) << ',' << fmt(se) << ','
                << fmt(cl.real()) << ',' << fmt(cl.imag()) << ',' << fmt(z) << '\n';
        }
    }
    o.files["ensemble.ndjson"] = ensemble_ndjson(s);
    o.files["ensemble_summary.csv"] = ensemble_summary_csv(s, closed);
    o.files["ensemble_cov.csv"] = cov.str();
    o.table = "ensemble_summary.csv";
    if (!cfg.xis.empty()) ch.at_most("mean_z_score", zmax, 3.0);
    if (!cfg.pairs.empty()) ch.at_most("covariance_z_score", czmax, 3.0);

    if (emit_paths && !p.sigmas.empty()) {
        const auto sampler = ensemble_sampler(k, cfg);
        std::string dump;
        for (std::size_t r = 0; r < cfg.n_replicas; ++r) dump += path_to_ndjson(sampler.sample(p.sigmas.size(), cfg.seed, r));
        o.files["paths.ndjson"] = std::move(dump);
    }

    if (!b["variance_time"].is_null()) {
        const double t = b["variance_time"];
        const auto est = mc_variance_field(p, k, cfg.epsilon, cfg.dt, cfg.n_replicas, t, cfg.seed, workers);
        const PairLattice pl{b["pair_xi_max"], b["pair_dnu"]};
        const auto lim = variance_physical(p, k, t, pl);
        const auto& mc = est.variance;
        if (std::abs(mc.dx - lim.dx) > 1e-12 * lim.dx || mc.n < lim.n || (mc.n - lim.n) % 2 != 0)
            throw ConfigError("ensemble.pair_dnu", "variance comparison needs the pair lattice's spatial grid to be "
                                                   "a centred subgrid of the problem lattice");
        const int off = (mc.n - lim.n) / 2;
        std::ostringstream vs;
        vs << "x,y,variance_mc,standard_error,variance_limit\n";
        double dist = 0.0, se_max = 0.0;
        for (int i = 0; i < lim.n; ++i)
            for (int j = 0; j < lim.n; ++j) {
                const double a = mc.at(i + off, j + off), se = est.standard_error.at(i + off, j + off);
                const double v = lim.at(i, j);
                dist = std::max(dist, std::abs(a - v));
                se_max = std::max(se_max, se);
                vs << fmt((i - lim.n / 2) * lim.dx) << ',' << fmt((j - lim.n / 2) * lim.dx) << ',' << fmt(a) << ','
                   << fmt(se) << ',' << fmt(v) << '\n';
            }
        o.files["variance_compare.csv"] = vs.str();
        const double budget = 3.0 * se_max + variance_truncation_bound(p, pl);
        ch.at_most("variance_field_sup_distance", dist, budget);
        metrics["variance_sup_distance"] = dist;
        metrics["variance_max_se"] = se_max;
    }
    metrics["mean_z_max"] = zmax;
    metrics["covariance_z_max"] = czmax;
}

TorusProblem make_torus(const json& c) {
    const json& b = c["twoscale"];
    TorusProblem tp;
    tp.n = b["n"];
    tp.kappa = c["problem"]["kappa"];
    tp.kappa_T = b["kappa_T"];
    const int N = b["N"];
    tp.small = N > 0 ? SmallScaleFamily::shell(N, tp.kappa_T) : SmallScaleFamily::empty();
    for (const auto& s : c["problem"]["sigmas"]) tp.sigmas.push_back({s[0].get<double>(), s[1].get<double>()});
    tp.kernel = make_kernel(c["kernel"]);
    tp.epsilon = b["epsilon"];
    tp.dt = b["dt"];
    tp.horizon = b["horizon"];
    tp.theta0 = make_modes(b["theta0"]);
    tp.phi = make_modes(b["phi"]);
    tp.noise_levels = b["noise_levels"];
    tp.cfl = b["cfl"];
    return tp;
}

void run_twoscale(const json& c, unsigned workers, Outcome& o, Checks& ch, json& metrics) {
    const TorusProblem tp = make_torus(c);
    const json& b = c["twoscale"];
    BoundCheckConfig cfg;
    cfg.n_replicas = b["replicas"];
    cfg.seed = c["seed"];
    cfg.workers = workers;
    cfg.richardson_replicas = b["richardson_replicas"];
    cfg.dx_replicas = b["dx_replicas"];
    const auto r = theorem_bound_check(tp, cfg);

    o.files["bound_table.csv"] = bound_table_csv({r});
    o.table = "bound_table.csv";
    std::string nd;
    for (const auto& q : r.replicas)
        nd += json{{"replica", q.replica},
                   {"theta_phi", q.theta_phi},
                   {"reduced_phi", q.reduced_phi},
                   {"reduced_half_phi", q.reduced_half_phi},
                   {"overshoot", q.overshoot}}
                  .dump() +
              '\n';
    o.files["replicas.ndjson"] = nd;

    ch.add("theorem_bound", r.lhs, r.rhs + 3.0 * r.lhs_se + r.budget, r.pass);
    ch.at_most("divergence_free", tp.small.divergence_residual(), 1e-12);
    double diag = 0.0;
    Engine eng = make_engine(cfg.seed, {0xd1a6});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 10 && !tp.small.is_empty(); ++i) {
        const Vec2 x{u(eng), u(eng)};
        const auto q = tp.small.diagonal(x);
        diag = std::max({diag, std::abs(q[0] - tp.kappa_T), std::abs(q[1]), std::abs(q[2]),
                         std::abs(q[3] - tp.kappa_T)});
    }
    ch.at_most("diagonal_covariance", diag, 1e-10);
    metrics["lhs"] = r.lhs;
    metrics["lhs_se"] = r.lhs_se;
    metrics["lhs_half"] = r.lhs_half;
    metrics["lhs_half_se"] = r.lhs_half_se;
    metrics["rhs"] = r.rhs;
    metrics["budget_dt"] = r.budget_dt;
    metrics["budget_dx"] = r.budget_dx;
    metrics["q_norm"] = r.q_norm;
    metrics["n_modes"] = r.n_modes;
    metrics["mean_distance"] = r.mean_distance;
    metrics["mean_distance_se"] = r.mean_distance_se;
    metrics["mean_distance_half"] = r.mean_distance_half;
    metrics["max_overshoot"] = r.max_overshoot;
}

// ---------------------------------------------------------------------------
// Files and manifests.

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("--config", "cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
    if (!out) throw std::runtime_error("cannot write " + p.string());
}

json parse_json(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
    }
}

// Sets a dotted key ("kernel.hurst") in a raw configuration.
void set_path(json& j, const std::string& key, const json& value) {
    json* cur = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError(key, "malformed sweep key");
        if (dot == std::string::npos) {
            (*cur)[part] = value;
            return;
        }
        if (!cur->contains(part)) (*cur)[part] = json::object();
        cur = &(*cur)[part];
        if (!cur->is_object()) throw ConfigError(key.substr(0, dot), "sweep key does not name an object");
        start = dot + 1;
    }
}

int write_run(const json& resolved, const std::filesystem::path& out, unsigned workers, bool emit_paths,
              Outcome& outcome) {
    outcome = execute(resolved, workers, emit_paths);
    std::filesystem::create_directories(out);
    json hashes = json::object();
    for (const auto& [name, data] : outcome.files) {
        write_file(out / name, data);
        hashes[name] = git_blob_sha1(data);
    }
    const std::string summary = outcome.summary.dump(2) + '\n';
    write_file(out / "summary.json", summary);
    hashes["summary.json"] = git_blob_sha1(summary);
    json manifest{{"manifest_version", 1},
                  {"tool", "stochtransport_run"},
                  {"experiment", resolved["experiment"]},
                  {"seed", resolved["seed"]},
                  {"workers", workers},
                  {"config", resolved},
                  {"content_hashes", hashes}};
    write_file(out / "manifest.json", manifest.dump(2) + '\n');
    return outcome.pass ? kOk : kCheckFailed;
}

// Values of a --sweep argument, parsed as JSON scalars where possible.
std::vector<json> sweep_values(const std::string& list) {
    std::vector<json> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) throw ConfigError("--sweep", "empty value");
        try {
            out.push_back(json::parse(item));
        } catch (const json::parse_error&) {
            out.push_back(item);
        }
    }
    if (out.empty()) throw ConfigError("--sweep", "no values");
    return out;
}

std::string value_label(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

// Combined CSV: a leading column with the swept value, then the rows of each
// run's primary table under a shared header.
std::string combine(const std::string& key, const std::vector<std::pair<json, Outcome>>& runs) {
    std::string out;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto& [v, o] = runs[i];
        std::istringstream in(o.files.at(o.table));
        std::string line;
        bool header = true;
        while (std::getline(in, line)) {
            if (header) {
                if (i == 0) out += key + ',' + line + '\n';
                header = false;
                continue;
            }
            out += value_label(v) + ',' + line + '\n';
        }
    }
    return out;
}

int run_sweep(const json& raw, const RunRequest& req, std::ostream& log) {
    const auto eq = req.sweep->find('=');
    if (eq == std::string::npos) throw ConfigError("--sweep", "expected key=v1,v2,...");
    const std::string key = req.sweep->substr(0, eq);
    const auto values = sweep_values(req.sweep->substr(eq + 1));

    std::vector<std::pair<json, Outcome>> runs;
    json entries = json::array();
    bool pass = true;
    for (const auto& v : values) {
        json cfg = raw;
        set_path(cfg, key, v);
        const json resolved = resolve_config(cfg);
        const std::string dir = key + "=" + value_label(v);
        Outcome o;
        const int code = write_run(resolved, req.out / dir, req.workers, req.emit_paths, o);
        log << dir << ": " << (code == kOk ? "pass" : "FAIL") << '\n';
        pass = pass && code == kOk;
        entries.push_back({{"value", v}, {"dir", dir}, {"pass", o.pass}});
        runs.emplace_back(v, std::move(o));
    }
    const std::string combined = combine(key, runs);
    write_file(req.out / "sweep.csv", combined);

    json checks = json::array();
    // Two-scale sweeps over the shell index also test the decay of lhs.
    if (key == "twoscale.N") {
        std::vector<std::pair<double, double>> nl;
        for (const auto& [v, o] : runs) nl.emplace_back(v.get<double>(), o.summary["metrics"]["lhs"].get<double>());
        std::sort(nl.begin(), nl.end());
        for (std::size_t i = 1; i < nl.size(); ++i) {
            if (nl[i].first != 2.0 * nl[i - 1].first) continue;
            const double ratio = nl[i].second > 0.0 ? nl[i - 1].second / nl[i].second : INFINITY;
            const bool ok = ratio >= 1.5;
            checks.push_back({{"name", "lhs_ratio_N" + fmt(nl[i - 1].first) + "_to_" + fmt(nl[i].first)},
                              {"value", ratio},
                              {"threshold", 1.5},
                              {"pass", ok}});
            pass = pass && ok;
        }
    }
    json summary{{"sweep", key}, {"runs", entries}, {"checks", checks}, {"pass", pass}};
    write_file(req.out / "sweep_summary.json", summary.dump(2) + '\n');
    return pass ? kOk : kCheckFailed;
}

}  // namespace

json resolve_config(const json& input) {
    const json* rawp = &input;
    if (input.is_object() && input.contains("manifest_version")) {
        if (!input.contains("config")) throw ConfigError("config", "manifest without a config member");
        rawp = &input.at("config");
    }
    const json& raw = *rawp;
    Reader r(raw, "");
    const std::string exp = r.text("experiment");
    if (std::find(std::begin(kExperiments), std::end(kExperiments), exp) == std::end(kExperiments))
        throw ConfigError("experiment", "expected one of veps, mean, covariance, asymptotics, ensemble, twoscale");
    json out;
    out["experiment"] = exp;
    out["seed"] = r.count("seed", 0);
    if (r.has("kernel")) r.raw("kernel");
    out["kernel"] = parse_kernel(raw);
    if (r.has("problem")) r.raw("problem");
    out["problem"] = parse_problem(raw);
    // Blocks of other experiments are rejected so typos cannot hide.
    if (r.has(exp)) r.raw(exp);
    out[exp] = parse_block(exp, raw);
    r.done();
    return out;
}

Outcome execute(const json& c, unsigned workers, bool emit_paths) {
    Outcome o;
    Checks ch;
    json metrics = json::object();
    const std::string exp = c.at("experiment");
    if (exp == "veps") run_veps(c, o, ch, metrics);
    else if (exp == "mean") run_mean(c, o, ch, metrics);
    else if (exp == "covariance") run_covariance(c, o, ch, metrics);
    else if (exp == "asymptotics") run_asymptotics(c, o, ch, metrics);
    else if (exp == "ensemble") run_ensemble_exp(c, workers, emit_paths, o, ch, metrics);
    else run_twoscale(c, workers, o, ch, metrics);
    o.pass = ch.pass;
    o.summary = {{"experiment", exp},
                 {"kernel", make_kernel(c["kernel"]).describe()},
                 {"pass", ch.pass},
                 {"checks", ch.list},
                 {"metrics", metrics}};
    return o;
}

std::string git_blob_sha1(std::string_view content) {
    const std::string head = "blob " + std::to_string(content.size()) + '\0';
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                    EVP_DigestUpdate(ctx, head.data(), head.size()) &&
                    EVP_DigestUpdate(ctx, content.data(), content.size()) && EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    if (!ok) throw std::runtime_error("SHA-1 digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

int run(const RunRequest& req, std::ostream& log) {
    try {
        json raw = parse_json(read_file(req.config));
        if (raw.is_object() && raw.contains("manifest_version")) {
            if (!raw.contains("config")) throw ConfigError("config", "manifest without a config member");
            raw = json(raw.at("config"));
        }
        if (req.seed) {
            if (!raw.is_object()) throw ConfigError("<root>", "expected an object");
            raw["seed"] = *req.seed;
        }
        if (req.sweep) return run_sweep(raw, req, log);
        const json resolved = resolve_config(raw);
        Outcome o;
        const int code = write_run(resolved, req.out, req.workers, req.emit_paths, o);
        for (const auto& c : o.summary["checks"])
            log << (c["pass"].get<bool>() ? "pass " : "FAIL ") << c["name"].get<std::string>() << " value="
                << c["value"].dump() << " threshold=" << c["threshold"].dump() << '\n';
        return code;
    } catch (const ConfigError& e) {
        log << "invalid config: " << e.what() << '\n';
        return kInvalidConfig;
    } catch (const DomainError& e) {
        log << "invalid config: " << e.what() << '\n';
        return kInvalidConfig;
    } catch (const CflError& e) {
        log << "numerical failure: " << e.what() << '\n';
        return kNumericalFailure;
    } catch (const NumericalError& e) {
        log << "numerical failure: " << e.what() << '\n';
        return kNumericalFailure;
    } catch (const RangeError& e) {
        log << "numerical failure: " << e.what() << '\n';
        return kNumericalFailure;
    } catch (const json::exception& e) {
        log << "invalid config: " << e.what() << '\n';
        return kInvalidConfig;
    } catch (const std::exception& e) {
        log << "runtime failure: " << e.what() << '\n';
        return kNumericalFailure;
    }
}

int main_entry(int argc, char** argv) {
    CLI::App app{"Experiments for transport-diffusion driven by regularised Gaussian noise"};
    RunRequest req;
    std::uint64_t seed = 0;
    std::string sweep;
    app.add_option("--config", req.config, "JSON configuration or manifest")->required();
    app.add_option("--out", req.out, "Output directory")->required();
    auto* seed_opt = app.add_option("--seed", seed, "Master seed (overrides the config)");
    app.add_option("--workers", req.workers, "Worker threads")->check(CLI::PositiveNumber);
    auto* sweep_opt = app.add_option("--sweep", sweep, "key=v1,v2,... run once per value");
    app.add_flag("--emit-paths", req.emit_paths, "Dump sampled drive paths as NDJSON (ensemble)");
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kInvalidConfig;
    }
    if (*seed_opt) req.seed = seed;
    if (*sweep_opt) req.sweep = sweep;
    return run(req, std::cerr);
}

}  // namespace stochtransport::cli
