#include "stochtransport/sampler.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stochtransport/errors.hpp"

namespace stochtransport {

double DrivePath::value_at(std::size_t k, double t) const {
    if (t < 0.0 || t > horizon() * (1.0 + 1e-12))
        throw RangeError("DrivePath::value_at: t outside path grid");
    const auto& v = values.at(k);
    const double x = t / dt;
    auto i = static_cast<std::size_t>(std::floor(x));
    if (i >= n_steps) return v[n_steps];
    const double w = x - static_cast<double>(i);
    if (w == 0.0) return v[i];
    return (1.0 - w) * v[i] + w * v[i + 1];
}

PathSampler::PathSampler(const KernelSpec& kernel, double dt, std::size_t n_steps)
    : dt_(dt), n_steps_(n_steps) {
    if (!(dt > 0.0)) throw DomainError("PathSampler: dt must be positive");
    if (n_steps == 0) throw DomainError("PathSampler: need at least one step");

    const std::size_t n = n_steps;
    autocov_.resize(n);
    for (std::size_t h = 0; h < n; ++h) {
        const double hd = static_cast<double>(h);
        autocov_[h] = 0.5 * (gamma(kernel, (hd + 1.0) * dt) + gamma(kernel, std::abs(hd - 1.0) * dt) -
                             2.0 * gamma(kernel, hd * dt));
    }

    auto factor = [&](double jitter) {
        std::vector<double> r = autocov_;
        r[0] *= 1.0 + jitter;
        coeffs_.clear();
        row_.assign(n, 0);
        innov_sd_.assign(n, 0.0);
        coeffs_.reserve(n * (n - 1) / 2);
        double v = r[0];
        if (!(v > 0.0)) return false;
        innov_sd_[0] = std::sqrt(v);
        std::vector<double> prev, cur;
        for (std::size_t m = 1; m < n; ++m) {
            // Extend the order-(m-1) predictor to order m.
            double acc = r[m];
            for (std::size_t j = 1; j < m; ++j) acc -= prev[j - 1] * r[m - j];
            const double reflect = acc / v;
            cur.assign(m, 0.0);
            cur[m - 1] = reflect;
            for (std::size_t j = 1; j < m; ++j) cur[j - 1] = prev[j - 1] - reflect * prev[m - j - 1];
            v *= 1.0 - reflect * reflect;
            if (!(v > 1e-300) || !(v > 0.0)) return false;
            row_[m] = coeffs_.size();
            coeffs_.insert(coeffs_.end(), cur.begin(), cur.end());
            innov_sd_[m] = std::sqrt(v);
            prev.swap(cur);
        }
        return true;
    };
    if (!factor(0.0) && !factor(1e-12)) {
        std::ostringstream os;
        os << "increment covariance of " << kernel.describe() << " is not positive definite on "
           << n << " steps of " << dt << " (after jitter 1e-12)";
        throw NumericalError(os.str());
    }
}

void PathSampler::draw(Engine& engine, std::span<double> path) const {
    if (path.size() != n_steps_ + 1) throw DomainError("PathSampler::draw: wrong output size");
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> inc(n_steps_);
    for (std::size_t m = 0; m < n_steps_; ++m) {
        double x = innov_sd_[m] * normal(engine);
        if (m > 0) {
            const double* phi = coeffs_.data() + row_[m];
            for (std::size_t j = 1; j <= m; ++j) x += phi[j - 1] * inc[m - j];
        }
        inc[m] = x;
    }
    path[0] = 0.0;
    for (std::size_t m = 0; m < n_steps_; ++m) path[m + 1] = path[m] + inc[m];
}

DrivePath PathSampler::sample(std::size_t n_components, std::uint64_t seed, std::uint64_t replica) const {
    DrivePath p;
    p.dt = dt_;
    p.n_steps = n_steps_;
    p.seed = seed;
    p.replica = replica;
    p.values.assign(n_components, std::vector<double>(n_steps_ + 1, 0.0));
    for (std::size_t k = 0; k < n_components; ++k) {
        Engine eng = make_engine(seed, {k, replica});
        draw(eng, p.values[k]);
    }
    return p;
}

DrivePath sample_paths(const KernelSpec& kernel, double dt, std::size_t n_steps,
                       std::size_t n_components, std::uint64_t seed) {
    return PathSampler(kernel, dt, n_steps).sample(n_components, seed, 0);
}

RegularizedDrive regularize(const DrivePath& path, double epsilon, const std::vector<double>& t_grid) {
    if (!(epsilon > 0.0)) throw DomainError("regularize: epsilon must be positive");
    if (epsilon < path.dt * (1.0 - 1e-12))
        throw DomainError("regularize: epsilon must resolve the path grid (epsilon >= dt)");
    double t_max = 0.0;
    for (double t : t_grid) {
        if (t < 0.0) throw DomainError("regularize: negative time in grid");
        t_max = std::max(t_max, t);
    }
    const double needed = t_max + epsilon;
    if (needed > path.horizon() * (1.0 + 1e-12)) {
        std::ostringstream os;
        os << "regularize: path horizon " << path.horizon() << " too short; need " << needed
           << " (extend by " << needed - path.horizon() << ")";
        throw RangeError(os.str());
    }

    const double dt = path.dt;
    const double two_eps = 2.0 * epsilon;
    // Last path node whose rate is needed.
    const auto n_nodes = std::min<std::size_t>(
        path.n_steps, static_cast<std::size_t>(std::ceil(t_max / dt)) + 1);

    RegularizedDrive out;
    out.epsilon = epsilon;
    out.t_grid = t_grid;
    const std::size_t nk = path.n_components();
    out.g_values.assign(nk, std::vector<double>(t_grid.size(), 0.0));
    out.rates.assign(nk, std::vector<double>(t_grid.size(), 0.0));

    std::vector<double> node_rate(n_nodes + 1), node_int(n_nodes + 1);
    for (std::size_t k = 0; k < nk; ++k) {
        auto rate = [&](double s) {
            const double hi = std::min(s + epsilon, path.horizon());
            return (path.value_at(k, hi) - path.value_at(k, std::max(s - epsilon, 0.0))) / two_eps;
        };
        node_int[0] = 0.0;
        node_rate[0] = rate(0.0);
        for (std::size_t i = 1; i <= n_nodes; ++i) {
            node_rate[i] = rate(static_cast<double>(i) * dt);
            node_int[i] = node_int[i - 1] + 0.5 * dt * (node_rate[i - 1] + node_rate[i]);
        }
        for (std::size_t j = 0; j < t_grid.size(); ++j) {
            const double t = t_grid[j];
            auto i = static_cast<std::size_t>(std::floor(t / dt + 1e-9));
            i = std::min(i, n_nodes);
            const double si = static_cast<double>(i) * dt;
            const double r = rate(t);
            out.rates[k][j] = r;
            out.g_values[k][j] =
                (t - si) <= 1e-12 * dt ? node_int[i] : node_int[i] + 0.5 * (t - si) * (node_rate[i] + r);
        }
    }
    return out;
}

std::string path_to_ndjson(const DrivePath& path) {
    std::string out;
    for (std::size_t k = 0; k < path.n_components(); ++k) {
        nlohmann::json rec{{"seed", path.seed},
                           {"replica", path.replica},
                           {"k", k},
                           {"dt", path.dt},
                           {"values", path.values[k]}};
        out += rec.dump();
        out += '\n';
    }
    return out;
}

}  // namespace stochtransport
