#include "stochtransport/twoscale.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "stochtransport/fft.hpp"
#include "stochtransport/parallel.hpp"
#include "stochtransport/rng.hpp"

namespace stochtransport {
namespace {

constexpr std::uint64_t kBrownianTag = 0x5ca1ab1eULL;

int wrap(int m, int n) { return ((m % n) + n) % n; }
int signed_index(int i, int n) { return i < n / 2 ? i : i - n; }

std::size_t idx(int i, int j, int n) { return static_cast<std::size_t>(i) * n + j; }

Vec2 unit_perp(const IVec2& k) {
    const double r = std::hypot(static_cast<double>(k[0]), static_cast<double>(k[1]));
    return {-k[1] / r, k[0] / r};
}

// Smallest even grid at least `lo`.
int even_at_least(int lo) { return lo % 2 == 0 ? lo : lo + 1; }

}  // namespace

SmallScaleFamily SmallScaleFamily::shell(int N, double kappa_T) {
    if (N < 1) throw DomainError("shell: N must be >= 1");
    if (!(kappa_T > 0.0)) throw DomainError("shell: kappa_T must be positive");
    SmallScaleFamily f;
    f.N = N;
    for (int k1 = 0; k1 <= 2 * N; ++k1)
        for (int k2 = -2 * N; k2 <= 2 * N; ++k2) {
            if (k1 == 0 && k2 <= 0) continue;
            const int r2 = k1 * k1 + k2 * k2;
            if (r2 >= N * N && r2 <= 4 * N * N) f.modes.push_back({k1, k2});
        }
    f.amplitude = std::sqrt(2.0 * kappa_T / static_cast<double>(f.modes.size()));
    return f;
}

SmallScaleFamily SmallScaleFamily::single(IVec2 k, double amplitude) {
    if (k[0] == 0 && k[1] == 0) throw DomainError("single: k must be nonzero");
    SmallScaleFamily f;
    f.amplitude = amplitude;
    f.modes.push_back(k);
    return f;
}

int SmallScaleFamily::max_component() const {
    int m = 0;
    for (const auto& k : modes) m = std::max({m, std::abs(k[0]), std::abs(k[1])});
    return m;
}

Vec2 SmallScaleFamily::field(std::size_t j, const Vec2& x) const {
    const auto& k = modes.at(j / 2);
    const Vec2 p = unit_perp(k);
    const double arg = kTwoPi * (k[0] * x[0] + k[1] * x[1]);
    const double s = amplitude * ((j % 2 == 0) ? std::cos(arg) : std::sin(arg));
    return {s * p[0], s * p[1]};
}

std::array<double, 4> SmallScaleFamily::diagonal(const Vec2& x) const {
    std::array<double, 4> q{0, 0, 0, 0};
    for (std::size_t j = 0; j < n_fields(); ++j) {
        const Vec2 v = field(j, x);
        q[0] += v[0] * v[0];
        q[1] += v[0] * v[1];
        q[2] += v[1] * v[0];
        q[3] += v[1] * v[1];
    }
    return q;
}

double SmallScaleFamily::divergence_residual() const {
    // v^_j is supported on +-k with coefficient (c / 2|k|) k^perp; the dot
    // product with m = +-k is taken in integers before scaling.
    double worst = 0.0;
    for (const auto& k : modes) {
        const long dot = static_cast<long>(k[0]) * (-k[1]) + static_cast<long>(k[1]) * k[0];
        const double r = std::hypot(static_cast<double>(k[0]), static_cast<double>(k[1]));
        worst = std::max(worst, std::abs(0.5 * amplitude / r * static_cast<double>(dot)));
    }
    return worst;
}

std::size_t TorusProblem::n_steps() const {
    const double s = horizon / dt;
    const long r = std::lround(s);
    if (r < 1 || std::abs(s - static_cast<double>(r)) > 1e-9 * s)
        throw DomainError("torus: horizon must be a positive multiple of dt");
    return static_cast<std::size_t>(r);
}

void TorusProblem::validate() const {
    if (n < 8 || n % 2 != 0) throw DomainError("torus: n must be even and >= 8");
    if (kappa < 0.0 || kappa_T < 0.0) throw DomainError("torus: diffusivities must be nonnegative");
    if (!(kappa + kappa_T > 0.0)) throw DomainError("torus: need kappa + kappa_T > 0");
    if (!(dt > 0.0)) throw DomainError("torus: dt must be positive");
    if (!sigmas.empty() && epsilon < dt) throw DomainError("torus: epsilon must be >= dt");
    if (noise_levels < 0 || noise_levels > 6) throw DomainError("torus: noise_levels must be in [0, 6]");
    n_steps();
    if (!small.is_empty()) {
        if (small.amplitude <= 0.0) throw DomainError("torus: small-scale amplitude must be positive");
        // Shells are calibrated so that c^2 #modes / 2 = kappa_T.
        if (small.N > 0) {
            const double implied = 0.5 * small.amplitude * small.amplitude * small.modes.size();
            if (std::abs(implied - kappa_T) > 1e-12 * std::max(1.0, kappa_T))
                throw DomainError("torus: small-scale family is not calibrated to kappa_T");
        }
        const double step = 3.0 * std::sqrt(2.0 * kappa_T * dt);
        if (step > cfl * dx()) {
            const double suggested = std::pow(cfl * dx() / 3.0, 2) / (2.0 * kappa_T);
            std::ostringstream os;
            os << "torus: small-scale step 3 sqrt(2 kappa_T dt) = " << step << " exceeds " << cfl
               << " dx = " << cfl * dx() << "; use dt <= " << suggested;
            throw CflError(os.str(), suggested);
        }
    }
}

std::vector<Complex> cosine_coefficients(int n, const std::vector<CosineMode>& modes) {
    std::vector<Complex> c(static_cast<std::size_t>(n) * n);
    for (const auto& md : modes) {
        if (std::abs(md.m[0]) >= n / 2 || std::abs(md.m[1]) >= n / 2)
            throw DomainError("cosine mode not resolved by the grid");
        const Complex h = 0.5 * md.amplitude * std::polar(1.0, md.phase);
        c[idx(wrap(md.m[0], n), wrap(md.m[1], n), n)] += h;
        c[idx(wrap(-md.m[0], n), wrap(-md.m[1], n), n)] += std::conj(h);
    }
    return c;
}

std::vector<double> torus_physical(int n, const std::vector<Complex>& coeffs) {
    Fft2d fft(n);
    auto b = fft.data();
    std::copy(coeffs.begin(), coeffs.end(), b.begin());
    fft.backward();
    std::vector<double> out(coeffs.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = b[i].real();
    return out;
}

double torus_inner(const std::vector<Complex>& f, const std::vector<Complex>& g) {
    double s = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) s += (f[i] * std::conj(g[i])).real();
    return s;
}

double torus_norm2(const std::vector<Complex>& f) {
    double s = 0.0;
    for (const auto& z : f) s += std::norm(z);
    return s;
}

double cosine_sup(const std::vector<CosineMode>& modes, int samples) {
    double worst = 0.0;
    for (int i = 0; i < samples; ++i)
        for (int j = 0; j < samples; ++j) {
            const double x = static_cast<double>(i) / samples, y = static_cast<double>(j) / samples;
            double v = 0.0;
            for (const auto& m : modes) v += m.amplitude * std::cos(kTwoPi * (m.m[0] * x + m.m[1] * y) + m.phase);
            worst = std::max(worst, std::abs(v));
        }
    return worst;
}

struct TwoScaleSimulator::Impl {
    int n = 0;
    int M = 0;  // padded transform size
    int K = 0;  // retained band |m_i| <= K
    std::unique_ptr<Fft2d> fa, fb, fs;
    std::vector<Complex> theta0;
    std::unique_ptr<PathSampler> sampler;
    // Retained modes: state index, padded index, m.
    struct Band {
        std::size_t s, p;
        int m0, m1;
    };
    std::vector<Band> band;
    struct Shell {
        std::size_t plus, minus;
        Vec2 perp;
    };
    std::vector<Shell> shell;
};

TwoScaleSimulator::TwoScaleSimulator(const TorusProblem& tp) : tp_(tp), impl_(new Impl) {
    tp_.validate();
    auto& I = *impl_;
    I.n = tp_.n;
    I.K = I.n / 2 - 1;
    const int kw = tp_.small.max_component();
    // A product of a band-K field and a band-kw field aliases into the band
    // only if M <= 2K + kw; pad past that (at least the usual 3/2).
    I.M = even_at_least(std::max(3 * I.n / 2, 2 * I.K + kw + 1));
    if (kw >= I.M / 2) throw DomainError("torus: small-scale shell not resolved by the padded grid");
    I.fa = std::make_unique<Fft2d>(I.M);
    I.fb = std::make_unique<Fft2d>(I.M);
    I.fs = std::make_unique<Fft2d>(I.n);
    I.theta0 = cosine_coefficients(I.n, tp_.theta0);
    for (int a = -I.K; a <= I.K; ++a)
        for (int b = -I.K; b <= I.K; ++b)
            I.band.push_back({idx(wrap(a, I.n), wrap(b, I.n), I.n), idx(wrap(a, I.M), wrap(b, I.M), I.M), a, b});
    for (const auto& k : tp_.small.modes)
        I.shell.push_back({idx(wrap(k[0], I.M), wrap(k[1], I.M), I.M),
                           idx(wrap(-k[0], I.M), wrap(-k[1], I.M), I.M), unit_perp(k)});
    if (!tp_.sigmas.empty())
        I.sampler = std::make_unique<PathSampler>(
            tp_.kernel, tp_.dt, static_cast<std::size_t>(std::ceil((tp_.horizon + tp_.epsilon) / tp_.dt - 1e-9)));
}

TwoScaleSimulator::~TwoScaleSimulator() { delete impl_; }

RegularizedDrive TwoScaleSimulator::drive(std::uint64_t seed, std::uint64_t replica, int level) const {
    const std::size_t steps = tp_.n_steps() << level;
    std::vector<double> grid(steps + 1);
    const double h = tp_.dt / static_cast<double>(1 << level);
    for (std::size_t s = 0; s <= steps; ++s) grid[s] = static_cast<double>(s) * h;
    if (!impl_->sampler) {
        RegularizedDrive d;
        d.epsilon = tp_.epsilon;
        d.t_grid = std::move(grid);
        return d;
    }
    return regularize(impl_->sampler->sample(tp_.sigmas.size(), seed, replica), tp_.epsilon, grid);
}

TwoScaleTrajectory TwoScaleSimulator::run(std::uint64_t seed, std::uint64_t replica,
                                          const SimulationOptions& opt) {
    return run(drive(seed, replica, opt.level), seed, replica, opt);
}

TwoScaleTrajectory TwoScaleSimulator::run(const RegularizedDrive& drv, std::uint64_t seed,
                                          std::uint64_t replica, const SimulationOptions& opt) {
    auto& I = *impl_;
    if (opt.level < 0 || opt.level > tp_.noise_levels)
        throw DomainError("simulate: level must be in [0, noise_levels]");
    const int sub = 1 << opt.level;
    const int fine = 1 << tp_.noise_levels;
    const int group = fine / sub;  // fine increments per step
    const std::size_t coarse = tp_.n_steps();
    const std::size_t steps = coarse * sub;
    const double h = tp_.dt / sub;
    if (drv.t_grid.size() != steps + 1) throw DomainError("simulate: drive not on the step grid");

    const int n = I.n, M = I.M;
    const double kd = tp_.kappa + tp_.kappa_T;
    std::vector<double> heat(n);
    for (int i = 0; i < n; ++i) {
        const double m = signed_index(i, n);
        heat[i] = std::exp(-kd * kTwoPi * kTwoPi * m * m * h);
    }

    std::vector<std::size_t> obs_step;
    for (double t : opt.observe) {
        const double s = t / h;
        const long r = std::lround(s);
        if (r < 0 || static_cast<std::size_t>(r) > steps || std::abs(s - static_cast<double>(r)) > 1e-9 * std::max(1.0, s))
            throw DomainError("simulate: observation time not on the step grid");
        obs_step.push_back(static_cast<std::size_t>(r));
    }

    TwoScaleTrajectory out;
    out.times = opt.observe;
    out.fields.resize(opt.observe.size());
    std::vector<Complex> th = I.theta0;

    auto grid_sup = [&]() {
        auto b = I.fs->data();
        std::copy(th.begin(), th.end(), b.begin());
        I.fs->backward();
        double m = 0.0;
        for (const auto& z : b) m = std::max(m, std::abs(z.real()));
        return m;
    };
    auto record = [&](std::size_t s) {
        for (std::size_t o = 0; o < obs_step.size(); ++o)
            if (obs_step[o] == s) out.fields[o] = th;
    };
    out.sup_initial = grid_sup();
    out.sup_max = out.sup_initial;
    record(0);

    Engine eng = make_engine(seed, {kBrownianTag, replica});
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t nf = tp_.small.n_fields();
    const double sd_fine = std::sqrt(tp_.dt / fine);
    std::vector<double> incr_fine(static_cast<std::size_t>(fine) * nf);
    const double c = tp_.small.amplitude;
    std::vector<Complex> incr(th.size());

    std::vector<Complex> ph0(n), ph1(n);
    for (std::size_t s = 0; s < steps; ++s) {
        if (nf > 0) {
            if (s % sub == 0)
                for (auto& z : incr_fine) z = sd_fine * normal(eng);
            const int f0 = static_cast<int>(s % sub) * group;

            auto A = I.fa->data();
            std::fill(A.begin(), A.end(), Complex{0.0, 0.0});
            for (std::size_t q = 0; q < I.shell.size(); ++q) {
                double wc = 0.0, ws = 0.0;
                for (int f = f0; f < f0 + group; ++f) {
                    wc += incr_fine[static_cast<std::size_t>(f) * nf + 2 * q];
                    ws += incr_fine[static_cast<std::size_t>(f) * nf + 2 * q + 1];
                }
                const Complex coef = 0.5 * c * Complex(wc, -ws);
                const auto& sh = I.shell[q];
                A[sh.plus] += sh.perp[0] * coef + Complex(0.0, 1.0) * (sh.perp[1] * coef);
                A[sh.minus] += sh.perp[0] * std::conj(coef) + Complex(0.0, 1.0) * (sh.perp[1] * std::conj(coef));
            }
            I.fa->backward();

            auto B = I.fb->data();
            std::fill(B.begin(), B.end(), Complex{0.0, 0.0});
            double grad2 = 0.0;
            for (const auto& b : I.band) {
                const Complex t = th[b.s];
                B[b.p] = Complex(0.0, kTwoPi) * t * Complex(b.m0, b.m1);
                grad2 += kTwoPi * kTwoPi * (b.m0 * b.m0 + b.m1 * b.m1) * std::norm(t);
            }
            I.fb->backward();
            for (std::size_t i = 0; i < B.size(); ++i) B[i] = (A[i] * std::conj(B[i])).real();
            I.fb->forward();
            const double scale = 1.0 / (static_cast<double>(M) * M);
            double inj = 0.0;
            for (const auto& b : I.band) {
                const Complex d = B[b.p] * scale;
                th[b.s] += d;
                inj += std::norm(d);
            }
            if (opt.track_energy) {
                out.injected += inj;
                out.predicted += h * tp_.kappa_T * grad2;
            }
        }

        Vec2 shift{0.0, 0.0};
        for (std::size_t k = 0; k < drv.n_components(); ++k) {
            const double dg = drv.g_values[k][s + 1] - drv.g_values[k][s];
            shift[0] += tp_.sigmas[k][0] * dg;
            shift[1] += tp_.sigmas[k][1] * dg;
        }
        for (int i = 0; i < n; ++i) {
            const double m = signed_index(i, n);
            ph0[i] = heat[i] * std::polar(1.0, kTwoPi * m * shift[0]);
            ph1[i] = std::polar(1.0, kTwoPi * m * shift[1]);
        }
        for (const auto& b : I.band) th[b.s] *= ph0[wrap(b.m0, n)] * ph1[wrap(b.m1, n)] * heat[wrap(b.m1, n)];

        if (opt.track_sup) out.sup_max = std::max(out.sup_max, grid_sup());
        record(s + 1);
    }
    return out;
}

TwoScaleTrajectory simulate_two_scale(const TorusProblem& tp, std::uint64_t seed, std::uint64_t replica,
                                      const SimulationOptions& opt) {
    TwoScaleSimulator sim(tp);
    return sim.run(seed, replica, opt);
}

std::vector<Complex> reduced_at(const TorusProblem& tp, const RegularizedDrive& drive, std::size_t ti,
                                double kappa_eff) {
    const double kd = kappa_eff < 0.0 ? tp.kappa + tp.kappa_T : kappa_eff;
    const int n = tp.n;
    const double t = drive.t_grid.at(ti);
    Vec2 shift{0.0, 0.0};
    for (std::size_t k = 0; k < drive.n_components(); ++k) {
        shift[0] += tp.sigmas.at(k)[0] * drive.g_values[k][ti];
        shift[1] += tp.sigmas.at(k)[1] * drive.g_values[k][ti];
    }
    auto out = cosine_coefficients(n, tp.theta0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            auto& z = out[idx(i, j, n)];
            if (z == Complex{0.0, 0.0}) continue;
            const double a = signed_index(i, n), b = signed_index(j, n);
            z *= std::exp(-kd * kTwoPi * kTwoPi * (a * a + b * b) * t) *
                 std::polar(1.0, kTwoPi * (a * shift[0] + b * shift[1]));
        }
    return out;
}

std::vector<std::vector<Complex>> reduced_solve(const TorusProblem& tp, const RegularizedDrive& drive,
                                                double kappa_eff) {
    std::vector<std::vector<Complex>> out;
    out.reserve(drive.t_grid.size());
    for (std::size_t i = 0; i < drive.t_grid.size(); ++i) out.push_back(reduced_at(tp, drive, i, kappa_eff));
    return out;
}

double q_operator_norm(const SmallScaleFamily& f) {
    // Fields of distinct k are L2-orthogonal; the cosine and sine fields of
    // one k have Gram block c^2 |k^perp/|k||^2 diag(1/2, 1/2).
    double worst = 0.0;
    for (const auto& k : f.modes) {
        const Vec2 p = unit_perp(k);
        const double g = f.amplitude * f.amplitude * (p[0] * p[0] + p[1] * p[1]);
        const double block[2][2] = {{0.5 * g, 0.0}, {0.0, 0.5 * g}};
        const double tr = block[0][0] + block[1][1];
        const double det = block[0][0] * block[1][1] - block[0][1] * block[1][0];
        const double lmax = 0.5 * tr + std::sqrt(std::max(0.0, 0.25 * tr * tr - det));
        worst = std::max(worst, lmax);
    }
    return worst;
}

double q_operator_norm_power(const SmallScaleFamily& f, int grid, int iterations, std::uint64_t seed) {
    if (f.is_empty()) return 0.0;
    const int M = grid > 0 ? grid : even_at_least(2 * f.max_component() + 2);
    if (f.max_component() >= M / 2) throw DomainError("q_operator_norm_power: grid does not resolve the shell");
    Fft2d fx(M), fy(M);
    Engine eng = make_engine(seed, {0});
    std::normal_distribution<double> normal(0.0, 1.0);
    auto X = fx.data();
    auto Y = fy.data();
    for (auto& z : X) z = normal(eng);
    for (auto& z : Y) z = normal(eng);
    fx.forward();
    fy.forward();
    const double scale = 1.0 / (static_cast<double>(M) * M);
    std::vector<Complex> ux(X.size()), uy(Y.size());
    for (std::size_t i = 0; i < ux.size(); ++i) {
        ux[i] = X[i] * scale;
        uy[i] = Y[i] * scale;
    }
    // Apply Q: (Q u) = sum_j v_j <v_j, u>, all in Fourier coefficients.
    auto apply = [&](const std::vector<Complex>& ax, const std::vector<Complex>& ay, std::vector<Complex>& bx,
                     std::vector<Complex>& by) {
        std::fill(bx.begin(), bx.end(), Complex{0.0, 0.0});
        std::fill(by.begin(), by.end(), Complex{0.0, 0.0});
        for (const auto& k : f.modes) {
            const Vec2 p = unit_perp(k);
            const std::size_t ip = idx(wrap(k[0], M), wrap(k[1], M), M);
            const std::size_t im = idx(wrap(-k[0], M), wrap(-k[1], M), M);
            const Complex proj = p[0] * ax[ip] + p[1] * ay[ip];  // p . u^(k)
            const double a_c = f.amplitude * proj.real();   // <v_{k,c}, u>
            const double a_s = -f.amplitude * proj.imag();  // <v_{k,s}, u>
            const Complex coef = 0.5 * f.amplitude * Complex(a_c, -a_s);
            bx[ip] += p[0] * coef;
            by[ip] += p[1] * coef;
            bx[im] += p[0] * std::conj(coef);
            by[im] += p[1] * std::conj(coef);
        }
    };
    auto inner = [](const std::vector<Complex>& ax, const std::vector<Complex>& ay, const std::vector<Complex>& bx,
                    const std::vector<Complex>& by) {
        double s = 0.0;
        for (std::size_t i = 0; i < ax.size(); ++i) s += (ax[i] * std::conj(bx[i]) + ay[i] * std::conj(by[i])).real();
        return s;
    };
    std::vector<Complex> vx(ux.size()), vy(uy.size());
    double lambda = 0.0;
    for (int it = 0; it < iterations; ++it) {
        apply(ux, uy, vx, vy);
        const double uu = inner(ux, uy, ux, uy);
        lambda = inner(vx, vy, ux, uy) / uu;
        const double vv = std::sqrt(inner(vx, vy, vx, vy));
        if (vv == 0.0) return 0.0;
        for (std::size_t i = 0; i < ux.size(); ++i) {
            ux[i] = vx[i] / vv;
            uy[i] = vy[i] / vv;
        }
    }
    return lambda;
}

double maximum_principle_check(const TwoScaleTrajectory& traj) { return traj.sup_max - traj.sup_initial; }

BoundCheck theorem_bound_check(const TorusProblem& tp, const BoundCheckConfig& cfg) {
    tp.validate();
    if (cfg.n_replicas < 2) throw DomainError("theorem_bound_check: need at least 2 replicas");
    BoundCheck r;
    r.N = tp.small.N;
    r.n_modes = tp.small.modes.size();
    r.q_norm = q_operator_norm(tp.small);
    r.t = cfg.t < 0.0 ? tp.horizon : cfg.t;
    const double s = r.t / tp.dt;
    const auto ti = static_cast<std::size_t>(std::lround(s));
    if (std::abs(s - static_cast<double>(ti)) > 1e-9 * std::max(1.0, s) || r.t > tp.horizon * (1 + 1e-12))
        throw DomainError("theorem_bound_check: t must be a step time within the horizon");

    const auto phi = cosine_coefficients(tp.n, tp.phi);
    const double sup0 = cosine_sup(tp.theta0);
    r.rhs = tp.horizon * r.q_norm * sup0 * sup0 * torus_norm2(phi);

    struct Rep {
        double d = 0.0, d_half = 0.0, overshoot = 0.0;
        double theta_phi = 0.0, red_phi = 0.0, half_phi = 0.0;
        std::vector<Complex> D, D_half;
    };
    std::vector<Rep> reps(cfg.n_replicas);
    const double k_half = tp.kappa + 0.5 * tp.kappa_T;
    parallel_for(
        cfg.n_replicas, cfg.workers, [&] { return std::make_unique<TwoScaleSimulator>(tp); },
        [&](std::unique_ptr<TwoScaleSimulator>& sim, std::size_t i) {
            const auto drv = sim->drive(cfg.seed, i, 0);
            SimulationOptions opt;
            opt.observe = {r.t};
            opt.track_sup = true;
            const auto traj = sim->run(drv, cfg.seed, i, opt);
            const auto& th = traj.fields[0];
            const auto red = reduced_at(tp, drv, ti);
            const auto half = reduced_at(tp, drv, ti, k_half);
            Rep& o = reps[i];
            o.D.resize(th.size());
            o.D_half.resize(th.size());
            for (std::size_t q = 0; q < th.size(); ++q) {
                o.D[q] = th[q] - red[q];
                o.D_half[q] = th[q] - half[q];
            }
            o.d = torus_inner(o.D, phi);
            o.d_half = torus_inner(o.D_half, phi);
            o.overshoot = maximum_principle_check(traj);
            o.theta_phi = torus_inner(th, phi);
            o.red_phi = torus_inner(red, phi);
            o.half_phi = torus_inner(half, phi);
        });

    const double nr = static_cast<double>(cfg.n_replicas);
    auto mean_se = [&](auto get, double& mean, double& se) {
        double m = 0.0;
        for (const auto& o : reps) m += get(o);
        m /= nr;
        double v = 0.0;
        for (const auto& o : reps) v += (get(o) - m) * (get(o) - m);
        mean = m;
        se = std::sqrt(v / (nr - 1.0) / nr);
    };
    mean_se([](const Rep& o) { return o.d * o.d; }, r.lhs, r.lhs_se);
    mean_se([](const Rep& o) { return o.d_half * o.d_half; }, r.lhs_half, r.lhs_half_se);
    r.max_overshoot = -1e300;
    for (const auto& o : reps) r.max_overshoot = std::max(r.max_overshoot, o.overshoot);
    r.replicas.reserve(reps.size());
    for (std::size_t i = 0; i < reps.size(); ++i)
        r.replicas.push_back({i, reps[i].theta_phi, reps[i].red_phi, reps[i].half_phi, reps[i].overshoot});

    auto field_mean = [&](auto get) {
        std::vector<Complex> m(get(reps[0]).size());
        for (const auto& o : reps)
            for (std::size_t q = 0; q < m.size(); ++q) m[q] += get(o)[q];
        for (auto& z : m) z /= nr;
        return m;
    };
    const auto ED = field_mean([](const Rep& o) -> const std::vector<Complex>& { return o.D; });
    const auto EDh = field_mean([](const Rep& o) -> const std::vector<Complex>& { return o.D_half; });
    r.mean_distance = std::sqrt(torus_norm2(ED));
    r.mean_distance_half = std::sqrt(torus_norm2(EDh));
    double spread = 0.0;
    for (const auto& o : reps)
        for (std::size_t q = 0; q < ED.size(); ++q) spread += std::norm(o.D[q] - ED[q]);
    r.mean_distance_se = std::sqrt(spread / (nr - 1.0) / nr);

    // Scheme budget: paired runs sharing all noise. First order in dt, so the
    // error at dt is about twice the dt -> dt/2 change.
    const std::size_t R = std::min(cfg.richardson_replicas, cfg.n_replicas);
    if (R > 0 && tp.noise_levels >= 1) {
        std::vector<double> diff(R);
        parallel_for(
            R, cfg.workers, [&] { return std::make_unique<TwoScaleSimulator>(tp); },
            [&](std::unique_ptr<TwoScaleSimulator>& sim, std::size_t i) {
                SimulationOptions o1;
                o1.level = 1;
                o1.observe = {r.t};
                const auto drv1 = sim->drive(cfg.seed, i, 1);
                const auto th1 = sim->run(drv1, cfg.seed, i, o1).fields[0];
                const auto red1 = reduced_at(tp, drv1, ti * 2);
                std::vector<Complex> D1(th1.size());
                for (std::size_t q = 0; q < D1.size(); ++q) D1[q] = th1[q] - red1[q];
                const double d1 = torus_inner(D1, phi);
                diff[i] = reps[i].d * reps[i].d - d1 * d1;
            });
        double m = 0.0;
        for (double d : diff) m += d;
        r.budget_dt = 2.0 * std::abs(m / static_cast<double>(R));
    }
    const std::size_t Rx = std::min(cfg.dx_replicas, cfg.n_replicas);
    if (Rx > 0) {
        TorusProblem fine = tp;
        fine.n = 2 * tp.n;
        fine.cfl = 2.0 * tp.cfl;  // same physical step, finer grid
        const auto phi_f = cosine_coefficients(fine.n, fine.phi);
        std::vector<double> diff(Rx);
        parallel_for(
            Rx, cfg.workers, [&] { return std::make_unique<TwoScaleSimulator>(fine); },
            [&](std::unique_ptr<TwoScaleSimulator>& sim, std::size_t i) {
                SimulationOptions o;
                o.observe = {r.t};
                const auto drv = sim->drive(cfg.seed, i, 0);
                const auto th = sim->run(drv, cfg.seed, i, o).fields[0];
                const auto red = reduced_at(fine, drv, ti);
                std::vector<Complex> D(th.size());
                for (std::size_t q = 0; q < D.size(); ++q) D[q] = th[q] - red[q];
                const double d = torus_inner(D, phi_f);
                diff[i] = reps[i].d * reps[i].d - d * d;
            });
        double m = 0.0;
        for (double d : diff) m += d;
        r.budget_dx = std::abs(m / static_cast<double>(Rx));
    }
    r.budget = r.budget_dt + r.budget_dx;
    r.pass = r.lhs <= r.rhs + 3.0 * r.lhs_se + r.budget;
    return r;
}

std::string bound_table_csv(const std::vector<BoundCheck>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "N,modes,q_norm,lhs,se,rhs,budget,pass,lhs_half,mean_distance,mean_distance_se,mean_distance_half\n";
    for (const auto& r : rows)
        os << r.N << ',' << r.n_modes << ',' << r.q_norm << ',' << r.lhs << ',' << r.lhs_se << ',' << r.rhs << ','
           << r.budget << ',' << (r.pass ? 1 : 0) << ',' << r.lhs_half << ',' << r.mean_distance << ','
           << r.mean_distance_se << ',' << r.mean_distance_half << '\n';
    return os.str();
}

}  // namespace stochtransport
