#include <cmath>
#include <map>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "frontstab/nonlinear.hpp"

using namespace frontstab;

namespace {

const fixtures::BistableFront& front() { return fixtures::bistable_front(); }

ExperimentSpec spec(PerturbationFamily fam, double amp, double T_end, bool field) {
    ExperimentSpec e;
    e.family = fam;
    e.amplitude = amp;
    e.pde.T_end = T_end;
    e.field = field;
    return e;
}

const NonlinearRun& cached(PerturbationFamily fam, double amp, double T_end, bool field) {
    static std::map<std::tuple<int, double, double, bool>, NonlinearRun> runs;
    auto key = std::make_tuple(static_cast<int>(fam), amp, T_end, field);
    auto it = runs.find(key);
    if (it == runs.end()) {
        const auto& f = front();
        it = runs.emplace(key, run_nonlinear(f.sys, f.p, f.sd, spec(fam, amp, T_end, field))).first;
    }
    return it->second;
}

const NonlinearRun& sech_run(double amp) { return cached(PerturbationFamily::sech, amp, 40.0, false); }
const NonlinearRun& gaussian_run(double amp) { return cached(PerturbationFamily::gaussian, amp, 20.0, true); }
const NonlinearRun& zero_run() { return cached(PerturbationFamily::zero, 0.0, 20.0, true); }

double sup_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void expect_kind(const std::function<void()>& f, ErrorKind k) {
    try {
        f();
        ADD_FAILURE() << "expected " << to_string(k);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), k) << e.what();
    }
}

}  // namespace

TEST(Pde, StationaryFrontStays) {
    const auto& f = front();
    PdeOptions o;
    o.T_end = 50;
    o.snapshot_dt = 1.0;
    auto tr = evolve_pde(f.sys, f.p, f.p.u_bar, o);
    ASSERT_EQ(tr.size(), 51u);
    double worst = 0;
    for (const auto& u : tr.u) worst = std::max(worst, sup_diff(u, f.p.u_bar));
    EXPECT_LT(worst, 1e-8);
}

TEST(Pde, ShiftedFrontStays) {
    const auto& f = front();
    ProfileOptions po;
    po.tol = 1e-8;
    po.anchor = 0.3;
    auto shifted = solve_profile(f.sys, f.p.grid, po);
    PdeOptions o;
    o.T_end = 50;
    o.snapshot_dt = 1.0;
    auto tr = evolve_pde(f.sys, shifted, shifted.u_bar, o);
    double worst = 0;
    for (const auto& u : tr.u) worst = std::max(worst, sup_diff(u, shifted.u_bar));
    EXPECT_LT(worst, 1e-8);
}

TEST(Pde, GaussianPerturbationDecaysAfterTransient) {
    const auto& run = cached(PerturbationFamily::gaussian, 0.01, 20.0, false);
    const auto& ph = run.phase;
    for (std::size_t k = 1; k < ph.t.size(); ++k)
        if (ph.t[k] >= 2.0 && ph.t[k] <= 15.0) EXPECT_LT(ph.u_inf[k], ph.u_inf[k - 1]) << ph.t[k];
}

TEST(Pde, Guards) {
    const auto& f = front();
    auto bad = f.p.u_bar;
    bad[1500] = 2.0;
    expect_kind([&] { (void)evolve_pde(f.sys, f.p, bad, {}); }, ErrorKind::invalid_argument);
    PdeOptions big;
    big.dt = 5.0;
    big.snapshot_dt = 5.0;
    expect_kind([&] { (void)evolve_pde(f.sys, f.p, f.p.u_bar, big); }, ErrorKind::invalid_argument);
    PdeOptions odd;
    odd.snapshot_dt = 0.015;
    expect_kind([&] { (void)evolve_pde(f.sys, f.p, f.p.u_bar, odd); }, ErrorKind::invalid_argument);

    // u_t = u_xx + u^2 from a wide plateau of height 0.45 blows up near t = 2.2
    auto sys = make_polynomial_system("quadratic", {{{1.0, {2}}}}, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1));
    FrontProfile p;
    p.grid = Grid1D(-30, 30, 601);
    p.u_bar.assign(601, 0.0);
    p.u_bar_prime.assign(601, 0.0);
    p.u_minus = p.u_plus = Eigen::VectorXd::Zero(1);
    std::vector<double> init(601);
    for (std::size_t i = 0; i < 601; ++i) init[i] = 0.45 * std::exp(-std::pow(p.grid.x(i) / 15, 8));
    PdeOptions o;
    o.T_end = 10;
    o.dt = 0.001;
    o.snapshot_dt = 0.1;
    expect_kind([&] { (void)evolve_pde(sys, p, init, o); }, ErrorKind::instability);
}

TEST(Phase, ZeroPerturbation) {
    const auto& run = zero_run();
    for (std::size_t k = 0; k < run.phase.t.size(); ++k) {
        EXPECT_LT(std::abs(run.phase.alpha[k]), 1e-9);
        EXPECT_LT(std::abs(run.fit.alpha[k]), 1e-9);
    }
    EXPECT_EQ(run.phase.alpha[0], 0.0);
    EXPECT_LT(std::abs(run.fit.alpha[0]), 1e-12);
}

TEST(Phase, VanishesBeforeOne) {
    const auto& run = gaussian_run(0.005);
    ASSERT_TRUE(run.field);
    for (std::size_t k = 0; k < run.phase.t.size() && run.phase.t[k] <= 1.0 + 1e-12; ++k) {
        EXPECT_EQ(run.phase.alpha[k], 0.0) << run.phase.t[k];
        for (double a : run.field->alpha[k]) ASSERT_EQ(a, 0.0) << run.phase.t[k];
    }
    EXPECT_NE(run.phase.alpha.back(), 0.0);
}

TEST(Phase, DerivativeDataLimit) {
    // u~ = u_bar + eps u_bar' ~ u_bar(. + eps), so the phase settles near -eps
    const auto& f = front();
    auto run = run_nonlinear(f.sys, f.p, f.sd, spec(PerturbationFamily::derivative, 0.01, 30.0, false));
    double ainf = alpha_limit(run.phase);
    EXPECT_NEAR(ainf, -0.01, 0.05 * 0.01);
    EXPECT_NEAR(run.phase.projection0, 0.01, 1e-6);
}

TEST(Phase, TranslationOracle) {
    const auto& f = front();
    auto run = run_nonlinear(f.sys, f.p, f.sd, spec(PerturbationFamily::translate, 0.05, 30.0, false));
    auto rep = verify_orbital_decay(run, f.p);
    EXPECT_NEAR(rep.alpha_inf, 0.05, 0.05 * 0.05);
    EXPECT_LT(run.phase.u_inf.back(), 1e-6);
    EXPECT_NEAR(run.fit.alpha.back(), 0.05, 0.05 * 0.05);
}

TEST(Phase, FitRecoversConstructedShift) {
    const auto& f = front();
    ProfileOptions po;
    po.tol = 1e-8;
    po.anchor = 0.3;
    auto shifted = solve_profile(f.sys, f.p.grid, po);
    SnapshotInterpolant s(f.p.grid, 1, shifted.u_bar);
    bool multi = true;
    EXPECT_NEAR(fit_shift(s, f.p, 0.0, 4.0, 0.05, &multi), 0.3, 1e-7);
    EXPECT_FALSE(multi);
    SnapshotInterpolant same(f.p.grid, 1, f.p.u_bar);
    EXPECT_NEAR(fit_shift(same, f.p, 0.0, 4.0, 0.05), 0.0, 1e-10);
}

TEST(Phase, MultiMinimumWarning) {
    const auto& f = front();
    std::vector<double> u(f.p.grid.N);
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = f.p.u_bar[i] + 0.6 * std::sin(2 * f.p.grid.x(i));
    SnapshotInterpolant s(f.p.grid, 1, u);
    bool multi = false;
    (void)fit_shift(s, f.p, 0.0, 4.0, 0.05, &multi);
    EXPECT_TRUE(multi);
}

TEST(Phase, GaugeConsistency) {
    for (const NonlinearRun* run : {&sech_run(0.01), &gaussian_run(0.005)}) {
        for (std::size_t k = 0; k < run->phase.t.size(); ++k) {
            if (run->phase.t[k] < 2.0) continue;
            double a = run->phase.alpha[k], b = run->fit.alpha[k];
            EXPECT_LE(std::abs(a - b), 0.05 * std::abs(a) + 1e-4) << run->phase.t[k];
        }
        EXPECT_FALSE(run->fit.warning);
    }
}

TEST(Phase, AlphaDotMatchesDifferencesAndIterationsBounded) {
    for (const NonlinearRun* run : {&sech_run(0.01), &gaussian_run(0.005)}) {
        EXPECT_LT(run->phase.alpha_dot_check, 1e-2);
        EXPECT_LE(run->phase.max_iterations, 5);
        EXPECT_EQ(run->phase.alpha[0], 0.0);
    }
    EXPECT_LE(gaussian_run(0.005).field->iterations, 5);
}

TEST(Phase, PerturbationTooLarge) {
    const auto& f = front();
    ExperimentSpec e = spec(PerturbationFamily::gaussian, 0.4, 2.0, false);
    expect_kind([&] { (void)run_nonlinear(f.sys, f.p, f.sd, e); }, ErrorKind::assumption_violated);
}

TEST(FieldKernel, DerivativesMatchDifferences) {
    const double hz = 1e-4, ht = 1e-5;
    for (double tau : {1.3, 1.7, 2.5, 6.0})
        for (double z : {-5.0, -1.0, 0.0, 0.7, 3.0}) {
            auto k = phase_kernel(z, tau);
            auto zp = phase_kernel(z + hz, tau), zm = phase_kernel(z - hz, tau);
            auto tp = phase_kernel(z, tau + ht), tm = phase_kernel(z, tau - ht);
            for (int m = 0; m < 4; ++m)
                EXPECT_NEAR(k.K0[m + 1], (zp.K0[m] - zm.K0[m]) / (2 * hz), 1e-6) << tau << " " << z << " " << m;
            for (int m = 0; m < 3; ++m)
                EXPECT_NEAR(k.K1[m], (tp.K0[m] - tm.K0[m]) / (2 * ht), 1e-5) << tau << " " << z << " " << m;
            EXPECT_NEAR(k.K2, (tp.K1[0] - tm.K1[0]) / (2 * ht), 1e-5) << tau << " " << z;
        }
    auto zero = phase_kernel(0.3, 0.8);
    for (double v : zero.K0) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(zero.K2, 0.0);
}

TEST(FieldKernel, FftConvolutionMatchesDirectSum) {
    Grid1D g(-30, 30, 601);
    PhaseKernelBank bank(g, 0.1);
    std::vector<double> f(g.N);
    for (std::size_t i = 0; i < g.N; ++i) f[i] = std::exp(-std::pow(g.x(i) - 2, 2) / 3) * (1 + 0.3 * g.x(i));
    for (std::size_t m : {13u, 25u, 180u}) {
        const double tau = 0.1 * m;
        const auto& ks = bank.at(m);
        auto F = bank.forward(f);
        for (int q : {0, 2, 5, 8}) {
            PhaseKernelBank::Spectrum prod(F.size());
            for (std::size_t b = 0; b < F.size(); ++b) prod[b] = ks[q][b] * F[b];
            auto conv = bank.inverse(prod);
            double worst = 0, scale = 0;
            for (std::size_t i = 0; i < g.N; i += 7) {
                double s = 0;
                for (std::size_t j = 0; j < g.N; ++j) {
                    auto k = phase_kernel(g.x(i) - g.x(j), tau);
                    double kv = q < 5 ? k.K0[q] : (q < 8 ? k.K1[q - 5] : k.K2);
                    s += kv * f[j];
                }
                worst = std::max(worst, std::abs(conv[i] - s));
                scale = std::max(scale, std::abs(s));
            }
            EXPECT_LT(worst, 1e-12 * std::max(1.0, scale)) << m << " " << q;
        }
    }
}

TEST(Field, ZeroDataGivesZeroField) {
    const auto& run = zero_run();
    ASSERT_TRUE(run.field);
    for (std::size_t k = 0; k < run.field->t.size(); ++k) {
        EXPECT_LT(detail::max_abs(run.field->alpha[k]), 1e-9);
        EXPECT_LT(detail::max_abs(run.field->v[k]), 1e-8);
    }
}

TEST(Field, EquilibratesToScalarPhase) {
    const auto& run = gaussian_run(0.005);
    const auto& f = *run.field;
    double ainf = alpha_limit(run.phase);
    for (double x : {-1.0, 0.0, 1.5}) {
        double a = f.alpha.back()[f.grid.nearest(x)];
        EXPECT_NEAR(a, ainf, 0.05 * std::abs(ainf)) << x;
    }
    EXPECT_LT(f.max_abs_alpha_x, 0.5);
}

TEST(Field, ShiftGuard) {
    const auto& f = front();
    ExperimentSpec e = spec(PerturbationFamily::derivative, 5.0, 4.0, true);
    e.field_options.max_relative_size = 10;
    auto u0 = make_perturbation(f.p, e);
    std::vector<double> init(u0.size());
    for (std::size_t i = 0; i < init.size(); ++i) init[i] = f.p.u_bar[i] + u0[i];
    auto tr = evolve_pde(f.sys, f.p, init, e.pde);
    expect_kind([&] { (void)extract_phase_field(f.sys, tr, f.p, f.sd, e.field_options); },
                ErrorKind::shift_non_invertible);
}

namespace {

struct ResidualCase {
    Grid1D g{-30, 30, 3001};
    std::vector<double> ub, ubx, v, vx, at, ax, axx;
    ResidualTerms eval() const {
        ResidualInputs in{&front().sys, g, 1, ub, ubx, v, vx, at, ax, axx};
        return compute_residual_terms(in);
    }
};

ResidualCase residual_case() {
    ResidualCase c;
    c.ub = front().p.u_bar;
    c.ubx = front().p.u_bar_prime;
    c.v.assign(c.g.N, 0.0);
    c.vx = c.at = c.ax = c.axx = c.v;
    return c;
}

}  // namespace

TEST(Residual, ZeroInputs) {
    auto c = residual_case();
    auto r = c.eval();
    for (const auto* f : {&r.Q, &r.R, &r.S, &r.T, &r.N_term})
        for (double x : *f) ASSERT_EQ(x, 0.0);
}

TEST(Residual, QuadraticCoefficient) {
    // Taylor oracle for f = -u^3 + 1.5 u^2 - 0.5 u: f''(u)/2 = -3u + 1.5
    auto c = residual_case();
    const std::vector<double> ds{-4e-3, -2e-3, -1e-3, 1e-3, 2e-3, 4e-3};
    std::vector<std::vector<double>> Q;
    for (double d : ds) {
        c.v.assign(c.g.N, d);
        Q.push_back(c.eval().Q);
    }
    double worst = 0;
    for (std::size_t i = 0; i < c.g.N; i += 10) {
        // least squares Q = c2 d^2 + c3 d^3
        double a11 = 0, a12 = 0, a22 = 0, b1 = 0, b2 = 0;
        for (std::size_t k = 0; k < ds.size(); ++k) {
            double p2 = ds[k] * ds[k], p3 = p2 * ds[k];
            a11 += p2 * p2;
            a12 += p2 * p3;
            a22 += p3 * p3;
            b1 += p2 * Q[k][i];
            b2 += p3 * Q[k][i];
        }
        double c2 = (b1 * a22 - b2 * a12) / (a11 * a22 - a12 * a12);
        double oracle = -3 * c.ub[i] + 1.5;
        if (std::abs(oracle) > 0.1) worst = std::max(worst, std::abs(c2 - oracle) / std::abs(oracle));
    }
    EXPECT_LT(worst, 0.02);
}

TEST(Residual, SIsMinusVTimesSlope) {
    auto c = residual_case();
    const double s = 0.013;
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> U(-0.01, 0.01);
    for (std::size_t i = 0; i < c.g.N; ++i) {
        c.v[i] = U(rng);
        c.ax[i] = s;
    }
    auto r = c.eval();
    for (std::size_t i = 0; i < c.g.N; ++i) ASSERT_EQ(r.S[i], -c.v[i] * s);
}

TEST(Residual, TwoPathsForT) {
    auto c = residual_case();
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> U(-0.05, 0.05);
    for (std::size_t i = 0; i < c.g.N; ++i) {
        c.v[i] = U(rng);
        c.ax[i] = U(rng);
    }
    auto r = c.eval();
    double worst = 0, scale = 0;
    for (std::size_t i = 0; i < c.g.N; ++i) {
        worst = std::max(worst, std::abs(r.T[i] - r.T_alt[i]));
        scale = std::max(scale, std::abs(r.T[i]));
    }
    EXPECT_LT(worst, 1e-14 * std::max(scale, 1e-3));
    expect_kind(
        [&] {
            c.ax[100] = -0.6;
            (void)c.eval();
        },
        ErrorKind::division_degenerate);
}

TEST(Residual, PerturbationEquationIdentity) {
    // v = u~(x + a(x,t), t) - u_bar(x) on a PDE trajectory with a prescribed smooth phase field a; checks
    // (d_t - L) v = (d_t - L)(u_bar' a) + Q + R_x + (d_x^2 + d_t) S + T
    const auto& f = front();
    const Grid1D& g = f.p.grid;
    const std::size_t N = g.N;
    auto u0 = make_perturbation(f.p, spec(PerturbationFamily::gaussian, 0.05, 0, false));
    std::vector<double> init(N);
    for (std::size_t i = 0; i < N; ++i) init[i] = f.p.u_bar[i] + u0[i];
    PdeOptions o;
    o.T_end = 2.04;
    o.dt = 0.0005;
    o.snapshot_dt = 0.01;
    auto tr = evolve_pde(f.sys, f.p, init, o);
    const std::size_t kc = 200;
    ASSERT_NEAR(tr.t[kc], 2.0, 1e-12);
    const double dt = o.snapshot_dt;

    auto phase = [](double x, double t, int dx, int dtt) {
        double e = std::exp(-x * x / 20), w = 1 + 0.5 * std::sin(t);
        double ex = -x / 10 * e, exx = (x * x / 100 - 0.1) * e;
        double ev = dx == 0 ? e : (dx == 1 ? ex : exx);
        double wv = dtt == 0 ? w : 0.5 * std::cos(t);
        return 0.05 * ev * wv;
    };
    auto fields = [&](std::size_t k, std::vector<double>& v, std::vector<double>& vx, ResidualTerms* res) {
        SnapshotInterpolant s(g, 1, tr.u[k]);
        const double t = tr.t[k];
        std::vector<double> at(N), ax(N), axx(N);
        v.resize(N);
        vx.resize(N);
        for (std::size_t i = 0; i < N; ++i) {
            double x = g.x(i), d = 0;
            double a = phase(x, t, 0, 0);
            ax[i] = phase(x, t, 1, 0);
            axx[i] = phase(x, t, 2, 0);
            at[i] = phase(x, t, 0, 1);
            v[i] = s.value(0, x + a, &d) - f.p.u_bar[i];
            vx[i] = d * (1 + ax[i]) - f.p.u_bar_prime[i];
        }
        if (res) *res = compute_residual_terms({&f.sys, g, 1, f.p.u_bar, f.p.u_bar_prime, v, vx, at, ax, axx});
    };

    std::vector<std::vector<double>> vs(5), Ss(5);
    ResidualTerms centre;
    for (int q = -2; q <= 2; ++q) {
        std::vector<double> v, vx;
        ResidualTerms r;
        fields(kc + q, v, vx, &r);
        vs[q + 2] = v;
        Ss[q + 2] = r.S;
        if (q == 0) centre = r;
    }
    auto ddt = [&](const std::vector<std::vector<double>>& y, std::size_t i) {
        return (y[0][i] - 8 * y[1][i] + 8 * y[3][i] - y[4][i]) / (12 * dt);
    };
    std::vector<double> v, vx;
    fields(kc, v, vx, nullptr);
    auto vxx = derivative4(vx, g.h());
    const double t = tr.t[kc];
    std::vector<double> w(N), wt(N);
    for (std::size_t i = 0; i < N; ++i) {
        w[i] = f.p.u_bar_prime[i] * phase(g.x(i), t, 0, 0);
        wt[i] = f.p.u_bar_prime[i] * phase(g.x(i), t, 0, 1);
    }
    auto wxx = derivative4(derivative4(w, g.h()), g.h());
    double worst = 0, scale = 0;
    for (std::size_t i = 0; i < N; ++i) {
        double x = g.x(i);
        if (std::abs(x) > 20) continue;
        double ub = f.p.u_bar[i];
        double df = -3 * ub * ub + 3 * ub - 0.5;
        double lhs = ddt(vs, i) - vxx[i] - df * v[i];
        double rhs = wt[i] - wxx[i] - df * w[i] + centre.Q[i] + centre.R_y[i] + centre.S_yy[i] + ddt(Ss, i) + centre.T[i];
        worst = std::max(worst, std::abs(lhs - rhs));
        scale = std::max(scale, std::abs(lhs));
    }
    EXPECT_GT(scale, 1e-3);
    EXPECT_LT(worst, 1e-4 * scale) << worst << " vs " << scale;
}

TEST(Diagnostics, ZetaSeriesAreRunningSuprema) {
    const auto& run = gaussian_run(0.005);
    for (const auto* s : {&run.zeta.zeta, &run.zeta.zeta1, &run.zeta.zeta2}) {
        ASSERT_EQ(s->size(), run.phase.t.size());
        for (std::size_t k = 1; k < s->size(); ++k) EXPECT_GE((*s)[k], (*s)[k - 1]);
        EXPECT_TRUE(std::isfinite(s->back()));
        EXPECT_GT(s->back(), 0.0);
    }
}

TEST(Orbital, SechRatesExceedEta0) {
    const auto& f = front();
    const auto& run = sech_run(0.01);
    auto r = verify_orbital_decay(run, f.p);
    EXPECT_GE(r.rate_inf, f.sd.eta0);
    EXPECT_GE(r.rate_l2, f.sd.eta0);
    EXPECT_GE(r.alpha_tail_rate, f.sd.eta0);
    EXPECT_GE(r.alpha_dot_rate, f.sd.eta0);
    EXPECT_TRUE(std::isfinite(r.C_alpha_dot));
    EXPECT_TRUE(std::isfinite(r.C_uniform));
    EXPECT_TRUE(r.pass);
}

TEST(Orbital, LinearResponseOfZeta) {
    const auto& f = front();
    auto a = verify_orbital_decay(sech_run(0.01), f.p), b = verify_orbital_decay(sech_run(0.005), f.p);
    EXPECT_NEAR(a.sup_zeta / b.sup_zeta, 2.0, 0.15 * 2.0);
    EXPECT_NEAR(a.C_uniform / b.C_uniform, 1.0, 0.15);
}

TEST(Orbital, ZeroDataIsQuiet) {
    const auto& run = zero_run();
    for (double u : run.phase.u_inf) EXPECT_LT(u, 1e-8);
}

TEST(Gaussian, TemplatesFiniteAndRefinementStable) {
    const auto& run = gaussian_run(0.005);
    auto r = verify_pointwise_gaussian(run);
    for (const auto* b : {&r.v, &r.alpha, &r.alpha_x}) {
        EXPECT_TRUE(std::isfinite(b->C)) << b->name;
        EXPECT_GT(b->C, 0.0) << b->name;
        EXPECT_LE(b->sup_ratio, 1 + 1e-9) << b->name;
        EXPECT_LT(b->refined_change, 0.1) << b->name << " C " << b->C << " vs " << b->C_doubled;
        EXPECT_TRUE(b->pass) << b->name;
    }
    EXPECT_TRUE(r.localized);
    EXPECT_FALSE(r.argmax_t.empty());
    EXPECT_TRUE(r.pass);
}

TEST(Gaussian, ZeroDataRatioZero) {
    auto r = verify_pointwise_gaussian(zero_run());
    EXPECT_EQ(r.v.C, 0.0);
    EXPECT_EQ(r.v.sup_ratio, 0.0);
}

TEST(Gaussian, TemplateFitRecoversPlantedWidth) {
    std::vector<FieldSample> s;
    for (double t = 0; t <= 10; t += 0.5)
        for (double x = -10; x <= 10; x += 0.25)
            s.push_back({x, t, 0.01 * 3.0 * field_template(FieldTemplate::v_gaussian, x, t, 8.0, 0.1)});
    auto fit = fit_field_bound(FieldTemplate::v_gaussian, s, 0.01, 0.1);
    EXPECT_EQ(fit.M, 8.0);
    EXPECT_NEAR(fit.C, 3.0, 1e-12);
    EXPECT_NEAR(fit.sup_ratio, 1.0, 1e-12);
}

TEST(Residual, ConstantsStableUnderHalvingE0) {
    auto a = residual_constants(*gaussian_run(0.005).field), b = residual_constants(*gaussian_run(0.0025).field);
    for (auto [x, y] : {std::pair{a.C_Q, b.C_Q}, std::pair{a.C_S, b.C_S}, std::pair{a.C_T, b.C_T}}) {
        EXPECT_GT(x, 0.0);
        EXPECT_LT(std::abs(x - y) / x, 0.15) << x << " vs " << y;
    }
}

TEST(Damping, ZeroRunBothSidesVanish) {
    auto d = damping_check(zero_run(), 1);
    for (std::size_t k = 0; k < d.t.size(); ++k) {
        EXPECT_LT(d.lhs[k], 1e-20);
        EXPECT_LT(d.rhs[k], 1e-20);
    }
}

TEST(Damping, GaussianRunConstantFiniteAndStable) {
    for (int K : {1, 2}) {
        auto d = damping_check(gaussian_run(0.005), K);
        EXPECT_TRUE(std::isfinite(d.C));
        EXPECT_GT(d.C, 0.0);
        for (std::size_t k = 0; k < d.t.size(); ++k) EXPECT_LE(d.lhs[k], d.C * d.rhs[k] * (1 + 1e-12));
        EXPECT_LT(d.change, 0.1);
        EXPECT_TRUE(d.pass);
    }
}

TEST(Experiment, PerturbationFamilies) {
    const auto& p = front().p;
    EXPECT_EQ(perturbation_family("sech"), PerturbationFamily::sech);
    expect_kind([] { (void)perturbation_family("wavelet"); }, ErrorKind::invalid_argument);
    auto g = make_perturbation(p, spec(PerturbationFamily::gaussian, 0.005, 1, false));
    EXPECT_DOUBLE_EQ(g[p.grid.nearest(0.0)], 0.005);
    auto t = make_perturbation(p, spec(PerturbationFamily::translate, 0.05, 1, false));
    std::size_t i = p.grid.nearest(0.0);
    EXPECT_NEAR(t[i], -0.05 * p.u_bar_prime[i], 1e-3 * 0.05);
    ExperimentSpec c = spec(PerturbationFamily::custom, 0, 1, false);
    c.custom.assign(5, 0.0);
    expect_kind([&] { (void)make_perturbation(p, c); }, ErrorKind::invalid_argument);
}
