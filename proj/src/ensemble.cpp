#include "stochtransport/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "stochtransport/errors.hpp"
#include "stochtransport/fft.hpp"
#include "stochtransport/sampler.hpp"

namespace stochtransport {

void ComplexMoments::add(Complex z) {
    ++n;
    const Complex d = z - mean;
    mean += d / static_cast<double>(n);
    const Complex d2 = z - mean;
    m2_re += d.real() * d2.real();
    m2_im += d.imag() * d2.imag();
    m2 = m2_re + m2_im;
}

void ComplexMoments::merge(const ComplexMoments& o) {
    if (o.n == 0) return;
    if (n == 0) {
        *this = o;
        return;
    }
    const double na = static_cast<double>(n), nb = static_cast<double>(o.n), nt = na + nb;
    const Complex d = o.mean - mean;
    m2_re += o.m2_re + d.real() * d.real() * na * nb / nt;
    m2_im += o.m2_im + d.imag() * d.imag() * na * nb / nt;
    m2 = m2_re + m2_im;
    mean += d * (nb / nt);
    n += o.n;
}

double ComplexMoments::variance() const { return n >= 2 ? m2 / static_cast<double>(n - 1) : 0.0; }
double ComplexMoments::standard_error() const {
    return n >= 2 ? std::sqrt(variance() / static_cast<double>(n)) : 0.0;
}
double ComplexMoments::standard_error_re() const {
    return n >= 2 ? std::sqrt(m2_re / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0;
}
double ComplexMoments::standard_error_im() const {
    return n >= 2 ? std::sqrt(m2_im / static_cast<double>(n - 1) / static_cast<double>(n)) : 0.0;
}

void ComplexCoMoments::add(Complex x, Complex y) {
    ++n;
    const Complex dx = x - mx;
    mx += dx / static_cast<double>(n);
    my += (y - my) / static_cast<double>(n);
    c += dx * std::conj(y - my);
}

void ComplexCoMoments::merge(const ComplexCoMoments& o) {
    if (o.n == 0) return;
    if (n == 0) {
        *this = o;
        return;
    }
    const double na = static_cast<double>(n), nb = static_cast<double>(o.n), nt = na + nb;
    const Complex dx = o.mx - mx, dy = o.my - my;
    c += o.c + dx * std::conj(dy) * (na * nb / nt);
    mx += dx * (nb / nt);
    my += dy * (nb / nt);
    n += o.n;
}

Complex ComplexCoMoments::covariance() const {
    return n >= 2 ? c / static_cast<double>(n - 1) : Complex{0.0, 0.0};
}

void RealMoments::add(double x) {
    const double n1 = static_cast<double>(n);
    ++n;
    const double nn = static_cast<double>(n);
    const double d = x - mean;
    const double dn = d / nn;
    const double dn2 = dn * dn;
    const double t1 = d * dn * n1;
    mean += dn;
    m4 += t1 * dn2 * (nn * nn - 3.0 * nn + 3.0) + 6.0 * dn2 * m2 - 4.0 * dn * m3;
    m3 += t1 * dn * (nn - 2.0) - 3.0 * dn * m2;
    m2 += t1;
}

void RealMoments::merge(const RealMoments& o) {
    if (o.n == 0) return;
    if (n == 0) {
        *this = o;
        return;
    }
    const double na = static_cast<double>(n), nb = static_cast<double>(o.n), nt = na + nb;
    const double d = o.mean - mean, d2 = d * d;
    const double m2n = m2 + o.m2 + d2 * na * nb / nt;
    const double m3n = m3 + o.m3 + d2 * d * na * nb * (na - nb) / (nt * nt) +
                       3.0 * d * (na * o.m2 - nb * m2) / nt;
    const double m4n = m4 + o.m4 + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (nt * nt * nt) +
                       6.0 * d2 * (na * na * o.m2 + nb * nb * m2) / (nt * nt) +
                       4.0 * d * (na * o.m3 - nb * m3) / nt;
    mean += d * nb / nt;
    m2 = m2n;
    m3 = m3n;
    m4 = m4n;
    n += o.n;
}

double RealMoments::variance() const { return n >= 2 ? m2 / static_cast<double>(n - 1) : 0.0; }

double RealMoments::variance_standard_error() const {
    if (n < 2) return 0.0;
    const double nn = static_cast<double>(n);
    const double mu2 = m2 / nn, mu4 = m4 / nn;
    return std::sqrt(std::max(0.0, mu4 - mu2 * mu2) / nn);
}

double EnsembleStats::covariance_standard_error(std::size_t ti, std::size_t p) const {
    const auto& b = cov_blocks[ti][p];
    if (b.size() < 2) return 0.0;
    Complex m{0.0, 0.0};
    for (auto z : b) m += z;
    m /= static_cast<double>(b.size());
    double s = 0.0;
    for (auto z : b) s += std::norm(z - m);
    const double nb = static_cast<double>(b.size());
    return std::sqrt(s / (nb - 1.0) / nb);
}

void EnsembleStats::merge(const EnsembleStats& o) {
    if (o.times != times || o.xis.size() != xis.size() || o.pairs.size() != pairs.size())
        throw DomainError("EnsembleStats::merge: observables differ");
    n_replicas += o.n_replicas;
    for (std::size_t t = 0; t < times.size(); ++t) {
        for (std::size_t x = 0; x < xis.size(); ++x) modes[t][x].merge(o.modes[t][x]);
        for (std::size_t q = 0; q < pairs.size(); ++q) {
            cov[t][q].merge(o.cov[t][q]);
            cov_blocks[t][q].insert(cov_blocks[t][q].end(), o.cov_blocks[t][q].begin(),
                                    o.cov_blocks[t][q].end());
        }
    }
}

std::size_t ensemble_block_count(std::size_t n_replicas) {
    return std::clamp<std::size_t>(n_replicas / 2, 1, 64);
}

namespace {

std::pair<std::size_t, std::size_t> block_range(std::size_t n, std::size_t nb, std::size_t b) {
    return {n * b / nb, n * (b + 1) / nb};
}

// Runs fill(acc, b) for every block on `workers` threads and folds the block
// partials into `total` strictly in block order via fold(total, acc, b).
template <class Total, class Make, class Fill, class Fold>
void run_blocks(std::size_t nb, unsigned workers, Total& total, Make make, Fill fill, Fold fold) {
    using Acc = decltype(make());
    std::vector<std::optional<Acc>> slots(nb);
    std::size_t next_fold = 0;
    std::mutex mu;
    std::atomic<std::size_t> next_block{0};
    std::exception_ptr err;

    auto work = [&] {
        try {
            for (;;) {
                const std::size_t b = next_block.fetch_add(1);
                if (b >= nb) return;
                Acc acc = make();
                fill(acc, b);
                std::lock_guard<std::mutex> lk(mu);
                if (err) return;
                slots[b] = std::move(acc);
                while (next_fold < nb && slots[next_fold]) {
                    fold(total, *slots[next_fold], next_fold);
                    slots[next_fold].reset();
                    ++next_fold;
                }
            }
        } catch (...) {
            std::lock_guard<std::mutex> lk(mu);
            if (!err) err = std::current_exception();
            next_block.store(nb);
        }
    };
    const unsigned w = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(nb)));
    if (w == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (unsigned i = 0; i < w; ++i) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }
    if (err) std::rethrow_exception(err);
}

std::size_t steps_for(double t_max, double epsilon, double dt) {
    return static_cast<std::size_t>(std::ceil((t_max + epsilon) / dt - 1e-9));
}

void check_common(const SpectralProblem& p, double epsilon, double dt, std::size_t n_replicas) {
    p.validate();
    if (n_replicas < 2) throw DomainError("ensemble: need at least 2 replicas");
    if (!(dt > 0.0)) throw DomainError("ensemble: dt must be positive");
    if (epsilon < dt) throw DomainError("ensemble: epsilon must be >= dt");
}

// Drive for one replica, or an all-zero drive when there is no noise.
RegularizedDrive replica_drive(const SpectralProblem& p, const std::optional<PathSampler>& sampler,
                               double epsilon, const std::vector<double>& times, std::uint64_t seed,
                               std::uint64_t replica) {
    if (!sampler) {
        RegularizedDrive d;
        d.epsilon = epsilon;
        d.t_grid = times;
        return d;
    }
    return regularize(sampler->sample(p.sigmas.size(), seed, replica), epsilon, times);
}

}  // namespace

PathSampler ensemble_sampler(const KernelSpec& k, const EnsembleConfig& cfg) {
    if (cfg.times.empty()) throw DomainError("ensemble: no observation times");
    const double t_max = *std::max_element(cfg.times.begin(), cfg.times.end());
    return PathSampler(k, cfg.dt, steps_for(t_max, cfg.epsilon, cfg.dt));
}

EnsembleStats run_ensemble(const SpectralProblem& p, const KernelSpec& k, const EnsembleConfig& cfg,
                           std::size_t first_replica) {
    check_common(p, cfg.epsilon, cfg.dt, cfg.n_replicas);
    if (cfg.times.empty()) throw DomainError("ensemble: no observation times");
    std::optional<PathSampler> sampler;
    if (!p.sigmas.empty()) sampler.emplace(ensemble_sampler(k, cfg));

    const std::size_t nt = cfg.times.size(), nx = cfg.xis.size(), np = cfg.pairs.size();
    std::vector<Complex> th0(nx);
    for (std::size_t x = 0; x < nx; ++x) th0[x] = p.theta0_hat(cfg.xis[x]);
    std::vector<std::pair<Complex, Complex>> th0p(np);
    for (std::size_t q = 0; q < np; ++q)
        th0p[q] = {p.theta0_hat(cfg.pairs[q].first), p.theta0_hat(cfg.pairs[q].second)};

    struct Partial {
        std::vector<std::vector<ComplexMoments>> modes;
        std::vector<std::vector<ComplexCoMoments>> cov;
    };
    auto make = [&] {
        Partial a;
        a.modes.assign(nt, std::vector<ComplexMoments>(nx));
        a.cov.assign(nt, std::vector<ComplexCoMoments>(np));
        return a;
    };
    auto mode_value = [&](const Complex& t0, const Vec2& xi, const RegularizedDrive& d, std::size_t ti) {
        double phase = 0.0;
        for (std::size_t c = 0; c < d.n_components(); ++c) phase += dot(p.sigmas[c], xi) * d.g_values[c][ti];
        return t0 * std::exp(Complex(-p.kappa * norm2(xi) * cfg.times[ti], phase));
    };
    const std::size_t nb = ensemble_block_count(cfg.n_replicas);
    auto fill = [&](Partial& a, std::size_t b) {
        const auto [lo, hi] = block_range(cfg.n_replicas, nb, b);
        for (std::size_t r = lo; r < hi; ++r) {
            const auto d = replica_drive(p, sampler, cfg.epsilon, cfg.times, cfg.seed, first_replica + r);
            for (std::size_t ti = 0; ti < nt; ++ti) {
                for (std::size_t x = 0; x < nx; ++x) a.modes[ti][x].add(mode_value(th0[x], cfg.xis[x], d, ti));
                for (std::size_t q = 0; q < np; ++q)
                    a.cov[ti][q].add(mode_value(th0p[q].first, cfg.pairs[q].first, d, ti),
                                     mode_value(th0p[q].second, cfg.pairs[q].second, d, ti));
            }
        }
    };

    EnsembleStats s;
    s.n_replicas = cfg.n_replicas;
    s.times = cfg.times;
    s.xis = cfg.xis;
    s.pairs = cfg.pairs;
    s.modes.assign(nt, std::vector<ComplexMoments>(nx));
    s.cov.assign(nt, std::vector<ComplexCoMoments>(np));
    s.cov_blocks.assign(nt, std::vector<std::vector<Complex>>(np));
    auto fold = [&](EnsembleStats& tot, const Partial& a, std::size_t) {
        for (std::size_t ti = 0; ti < nt; ++ti) {
            for (std::size_t x = 0; x < nx; ++x) tot.modes[ti][x].merge(a.modes[ti][x]);
            for (std::size_t q = 0; q < np; ++q) {
                tot.cov[ti][q].merge(a.cov[ti][q]);
                tot.cov_blocks[ti][q].push_back(a.cov[ti][q].covariance());
            }
        }
    };
    run_blocks(nb, cfg.workers, s, make, fill, fold);
    return s;
}

VarianceFieldEstimate mc_variance_field(const SpectralProblem& p, const KernelSpec& k, double epsilon,
                                        double dt, std::size_t n_replicas, double t,
                                        std::uint64_t seed, unsigned workers) {
    check_common(p, epsilon, dt, n_replicas);
    if (t < 0.0) throw DomainError("mc_variance_field: negative time");
    std::optional<PathSampler> sampler;
    if (!p.sigmas.empty()) sampler.emplace(k, dt, steps_for(t, epsilon, dt));
    const auto initial = lattice_initial(p);
    const std::vector<double> times{t};
    const std::size_t npts = p.lattice.size();

    // Field partials are large; keep the block count modest.
    const std::size_t nb = std::min<std::size_t>(ensemble_block_count(n_replicas), 16);
    auto make = [&] { return std::vector<RealMoments>(npts); };
    auto fill = [&](std::vector<RealMoments>& acc, std::size_t b) {
        Fft2d fft(p.lattice.n);
        const auto [lo, hi] = block_range(n_replicas, nb, b);
        for (std::size_t r = lo; r < hi; ++r) {
            const auto d = replica_drive(p, sampler, epsilon, times, seed, r);
            const auto modes = lattice_modes(p, initial, d, 0);
            const auto f = reconstruct(p.lattice, modes, fft);
            for (std::size_t i = 0; i < npts; ++i) acc[i].add(f.values[i]);
        }
    };
    std::vector<RealMoments> total(npts);
    auto fold = [](std::vector<RealMoments>& tot, const std::vector<RealMoments>& a, std::size_t) {
        for (std::size_t i = 0; i < tot.size(); ++i) tot[i].merge(a[i]);
    };
    run_blocks(nb, workers, total, make, fill, fold);

    VarianceFieldEstimate out;
    out.n_replicas = n_replicas;
    for (auto* f : {&out.variance, &out.standard_error, &out.mean}) {
        f->n = p.lattice.n;
        f->dx = p.lattice.dx();
        f->values.resize(npts);
    }
    for (std::size_t i = 0; i < npts; ++i) {
        out.variance.values[i] = total[i].variance();
        out.standard_error.values[i] = total[i].variance_standard_error();
        out.mean.values[i] = total[i].mean;
    }
    return out;
}

std::string ensemble_ndjson(const EnsembleStats& s) {
    std::ostringstream os;
    for (std::size_t ti = 0; ti < s.times.size(); ++ti) {
        for (std::size_t x = 0; x < s.xis.size(); ++x) {
            const auto& m = s.modes[ti][x];
            nlohmann::json j{{"kind", "mode"},
                             {"t", s.times[ti]},
                             {"xi", {s.xis[x][0], s.xis[x][1]}},
                             {"n", m.n},
                             {"re_mean", m.mean.real()},
                             {"im_mean", m.mean.imag()},
                             {"var", m.variance()},
                             {"se", m.standard_error()}};
            os << j.dump() << '\n';
        }
        for (std::size_t q = 0; q < s.pairs.size(); ++q) {
            const Complex c = s.covariance(ti, q);
            nlohmann::json j{{"kind", "covariance"},
                             {"t", s.times[ti]},
                             {"xi", {s.pairs[q].first[0], s.pairs[q].first[1]}},
                             {"eta", {s.pairs[q].second[0], s.pairs[q].second[1]}},
                             {"n", s.cov[ti][q].n},
                             {"re_cov", c.real()},
                             {"im_cov", c.imag()},
                             {"se", s.covariance_standard_error(ti, q)}};
            os << j.dump() << '\n';
        }
    }
    return os.str();
}

std::string ensemble_summary_csv(const EnsembleStats& s,
                                 const std::vector<std::vector<Complex>>& closed) {
    std::ostringstream os;
    os.precision(17);
    os << "t,xi1,xi2,re_mean,im_mean,var,se,re_closed,im_closed,z_score\n";
    for (std::size_t ti = 0; ti < s.times.size(); ++ti)
        for (std::size_t x = 0; x < s.xis.size(); ++x) {
            const auto& m = s.modes[ti][x];
            const Complex c = closed.at(ti).at(x);
            const double se = m.standard_error();
            const double z = se > 0.0 ? std::abs(m.mean - c) / se : 0.0;
            os << s.times[ti] << ',' << s.xis[x][0] << ',' << s.xis[x][1] << ',' << m.mean.real() << ','
               << m.mean.imag() << ',' << m.variance() << ',' << se << ',' << c.real() << ',' << c.imag()
               << ',' << z << '\n';
        }
    return os.str();
}

}  // namespace stochtransport
