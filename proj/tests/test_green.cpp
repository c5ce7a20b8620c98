#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "frontstab/green.hpp"

using namespace frontstab;

namespace {

const fixtures::BistableFront& front() { return fixtures::bistable_front(); }

double heat_with_decay(double x, double t) { return std::exp(-x * x / (4 * t) - t) / std::sqrt(4 * std::numbers::pi * t); }

struct ConstantCase {
    ReactionSystem sys = linear_system(1.0);
    FrontProfile p;
    std::unique_ptr<ModeIntegrator> mi;
};

const ConstantCase& constant_case() {
    static const ConstantCase* c = [] {
        auto* out = new ConstantCase;
        out->p = rest_state_profile(out->sys, Grid1D(-20, 20, 2001));
        out->mi = std::make_unique<ModeIntegrator>(out->sys, out->p);
        return out;
    }();
    return *c;
}

const GreenContour& bistable_contour(double t_min) {
    static std::map<double, std::unique_ptr<GreenContour>> cache;
    auto& slot = cache[t_min];
    if (!slot) {
        const auto& f = front();
        slot = std::make_unique<GreenContour>(*f.mi, pole_part(f.p, f.sd), make_contour(f.sd.eta, t_min));
    }
    return *slot;
}

std::vector<std::size_t> nodes_at(const Grid1D& g, std::initializer_list<double> xs) {
    std::vector<std::size_t> out;
    for (double x : xs) out.push_back(g.nearest(x));
    return out;
}

std::vector<std::size_t> node_range(const Grid1D& g, double a, double b, double step) {
    std::vector<std::size_t> out;
    for (double x = a; x <= b + 1e-12; x += step) out.push_back(g.nearest(x));
    return out;
}

}  // namespace

TEST(Contour, GeometryAndTruncation) {
    const double eta = 0.375;
    auto c = make_contour(eta, 0.1);
    EXPECT_DOUBLE_EQ(c.kappa, eta / 4);
    EXPECT_DOUBLE_EQ(c.theta1, eta / 4);
    EXPECT_DOUBLE_EQ(c.theta2, 1.0);
    EXPECT_LT(c.tail_estimate(), 1e-8);
    EXPECT_NEAR(c.ray(c.s_cut).real() * c.t_min, std::log(1e-12), 1e-9);
    for (int level : {0, 1}) {
        auto nodes = contour_nodes(c, level);
        ASSERT_EQ(nodes.size() % 2, 0u);
        cd total = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            const auto& a = nodes[k];
            const auto& b = nodes[nodes.size() - 1 - k];
            EXPECT_LT(std::abs(a.lambda - std::conj(b.lambda)), 1e-12);
            EXPECT_LT(std::abs(a.weight + std::conj(b.weight)), 1e-12);
            EXPECT_LE(a.lambda.real(), -eta / 2 + 1e-12);
            EXPECT_LE(a.lambda.real(), -c.theta1 - c.theta2 * std::abs(a.lambda.imag()) + 1e-12);
            total += a.weight;
        }
        // int d lambda = end - start
        EXPECT_LT(std::abs(total - (c.ray(c.s_cut) - std::conj(c.ray(c.s_cut)))), 1e-9);
    }
    EXPECT_THROW(make_contour(-1.0), Error);
}

TEST(Green, ConstantCoefficientExactKernel) {
    const auto& cc = constant_case();
    GreenContour gc(*cc.mi, no_pole(1), make_contour(1.0, 0.5));
    const auto& g = cc.p.grid;
    auto xi = node_range(g, -6, 6, 0.5);
    auto yj = nodes_at(g, {0.0, 1.5});
    auto s = gc.kernel(xi, yj, {0.5, 1.0, 3.0}, true);
    EXPECT_LT(s.imag_max, 1e-8);
    double worst = 0, worst_y = 0;
    for (std::size_t k = 0; k < s.t.size(); ++k)
        for (std::size_t a = 0; a < xi.size(); ++a)
            for (std::size_t b = 0; b < yj.size(); ++b) {
                double r = g.x(xi[a]) - g.x(yj[b]), t = s.t[k];
                worst = std::max(worst, std::abs(s.G[s.index(k, a, b)] - heat_with_decay(r, t)));
                worst_y = std::max(worst_y, std::abs(s.G_y[s.index(k, a, b)] - heat_with_decay(r, t) * r / (2 * t)));
            }
    EXPECT_LT(worst, 1e-4);
    EXPECT_LT(worst_y, 1e-4);
    auto at0 = gc.kernel({g.nearest(0.0)}, {g.nearest(0.0)}, {1.0});
    EXPECT_NEAR(at0.G[0], 0.103777, 1e-4);
    EXPECT_NEAR(at0.G[0], heat_with_decay(0, 1), 1e-6);
}

TEST(Green, EvolutionOracleConstantCoefficient) {
    const auto& cc = constant_case();
    const std::size_t y = cc.p.grid.nearest(0.0);
    auto ev = green_evolve(cc.sys, cc.p, y, {1.0}, 0.05);
    EXPECT_NEAR(ev.mass0, 1.0, 1e-10);
    EXPECT_NEAR(ev.G[0][y], 0.10378, 1e-5);
    EXPECT_NEAR(ev.G[0][y], heat_with_decay(0, 1), 1e-5);
    EXPECT_THROW(green_evolve(cc.sys, cc.p, y, {1.0}, 0.01), Error);
    EvolveOptions bad;
    bad.dt = 5.0;
    EXPECT_THROW(evolve_linear(cc.sys, cc.p, gaussian_delta(cc.p, y, 0.1), {5.0}, bad), Error);
}

TEST(Green, ContourMatchesEvolutionOnBox) {
    const auto& f = front();
    const auto& gc = bistable_contour(0.5);
    const auto& g = f.p.grid;
    auto xi = nodes_at(g, {-2, -1, 0, 1, 2});
    auto yj = nodes_at(g, {-1, 0, 1.5});
    std::vector<double> ts{0.5, 2.0, 5.0};
    auto s = gc.kernel(xi, yj, ts);
    EXPECT_LT(s.imag_max, 1e-8);
    double diff = 0, mag = 0;
    for (std::size_t b = 0; b < yj.size(); ++b) {
        auto ev = green_evolve(f.sys, f.p, yj[b], ts, 0.05);
        for (std::size_t k = 0; k < ts.size(); ++k)
            for (std::size_t a = 0; a < xi.size(); ++a) {
                double c = s.G[s.index(k, a, b)], e = ev.G[k][xi[a]];
                diff = std::max(diff, std::abs(c - e));
                mag = std::max(mag, std::abs(e));
            }
    }
    EXPECT_LT(diff / mag, 1e-3);
}

TEST(Green, PreservesTranslationMode) {
    const auto& f = front();
    const auto& gc = bistable_contour(0.5);
    std::vector<double> ts{0.5, 2.0, 5.0};
    auto ap = gc.apply(f.p.u_bar_prime, ts);
    const double ref = discrete_lp_norm(f.p.u_bar_prime, f.p.grid.h(), INFINITY);
    for (std::size_t k = 0; k < ts.size(); ++k) {
        double worst = 0;
        for (std::size_t i = 0; i < f.p.grid.N; ++i)
            worst = std::max(worst, std::abs(ap.values[k * f.p.grid.N + i] - f.p.u_bar_prime[i]));
        EXPECT_LT(worst / ref, 1e-3) << ts[k];
    }
}

TEST(Green, ApproximateIdentityAtShortTime) {
    const auto& f = front();
    const auto& gc = bistable_contour(0.05);
    const std::size_t N = f.p.grid.N;
    std::vector<double> h(N);
    for (std::size_t i = 0; i < N; ++i) h[i] = std::exp(-f.p.grid.x(i) * f.p.grid.x(i) / 50);
    auto ap = gc.apply(h, {0.05});
    auto ev = evolve_linear(f.sys, f.p, h, {0.05}, {1e-4});
    double dev = 0, osc = 0;
    for (std::size_t i = 0; i < N; ++i) {
        dev = std::max(dev, std::abs(ap.values[i] - h[i]));
        osc = std::max(osc, std::abs(ap.values[i] - ev[0][i]));
    }
    EXPECT_LT(dev, 0.02);
    EXPECT_LT(osc, 1e-4);
}

TEST(Green, SemigroupProperty) {
    const auto& f = front();
    const auto& gc = bistable_contour(0.5);
    const std::size_t N = f.p.grid.N;
    std::vector<double> h(N);
    for (std::size_t i = 0; i < N; ++i) h[i] = std::exp(-std::pow(f.p.grid.x(i) - 1.0, 2));
    auto once = gc.apply(h, {1.0, 2.5});
    std::vector<double> mid(once.values.begin(), once.values.begin() + N);
    auto twice = gc.apply(mid, {1.5});
    double diff = 0, mag = 0;
    for (std::size_t i = 0; i < N; ++i) {
        diff = std::max(diff, std::abs(twice.values[i] - once.values[N + i]));
        mag = std::max(mag, std::abs(once.values[N + i]));
    }
    EXPECT_LT(diff / mag, 5e-3);
}

TEST(Green, RefinementStableUnderNodeDoubling) {
    const auto& f = front();
    auto spec = make_contour(f.sd.eta, 0.5);
    GreenContour base(*f.mi, pole_part(f.p, f.sd), spec);
    const auto& g = f.p.grid;
    auto xi = nodes_at(g, {-3, 0, 2});
    auto yj = nodes_at(g, {-1, 0.5});
    auto a = base.kernel(xi, yj, {0.5, 3.0});
    spec.min_level = a.level + 1;
    GreenContour finer(*f.mi, pole_part(f.p, f.sd), spec);
    auto b = finer.kernel(xi, yj, {0.5, 3.0});
    for (std::size_t q = 0; q < a.G.size(); ++q) EXPECT_LT(std::abs(a.G[q] - b.G[q]), 1e-6);
}

TEST(Green, RejectsTimesBelowContourMinimum) {
    const auto& gc = bistable_contour(0.5);
    EXPECT_THROW((void)gc.kernel({1500}, {1500}, {0.2}), Error);
}

TEST(Decomposition, IdentitiesAndLimits) {
    const auto& f = front();
    const auto& gc = bistable_contour(0.5);
    const auto& g = f.p.grid;
    auto xi = nodes_at(g, {-1, 0, 0.5, 1});
    auto yj = nodes_at(g, {-0.5, 0, 0.7});
    std::vector<double> ts{0.5, 1.5, 25.0};
    auto s = gc.kernel(xi, yj, ts, true);
    auto pole = pole_part(f.p, f.sd);
    auto d = decompose(s, f.p, pole);
    for (std::size_t q = 0; q < s.G.size(); ++q) {
        EXPECT_EQ(s.G[q] - d.E[q] - d.G_tilde[q], 0.0);
        EXPECT_EQ(s.G[q] - d.F[q] - d.H_tilde[q], 0.0);
        EXPECT_EQ(s.G_y[q] - d.E_y[q] - d.G_tilde_y[q], 0.0);
    }
    for (std::size_t a = 0; a < xi.size(); ++a)
        for (std::size_t b = 0; b < yj.size(); ++b) {
            std::size_t q0 = s.index(0, a, b), q2 = s.index(2, a, b);
            EXPECT_EQ(d.E[q0], 0.0);
            EXPECT_EQ(d.G_tilde[q0], s.G[q0]);
            EXPECT_EQ(d.F[q0], 0.0);
            EXPECT_LE(std::abs(d.G_tilde[q2]), 1e-3 * std::abs(d.E[q2]));
        }
}

TEST(Decomposition, SecondDecompositionLimits) {
    const auto& f = front();
    auto pole = pole_part(f.p, f.sd);
    const auto& g = f.p.grid;
    KernelSamples s;
    s.xi = nodes_at(g, {0.0, 0.3});
    s.yj = nodes_at(g, {0.0, 0.2});
    s.t = {0.8, 50.0};
    s.G.assign(s.t.size() * s.xi.size() * s.yj.size(), 0.25);
    auto d = decompose(s, f.p, pole);
    for (std::size_t a = 0; a < s.xi.size(); ++a)
        for (std::size_t b = 0; b < s.yj.size(); ++b) {
            EXPECT_EQ(d.F[s.index(0, a, b)], 0.0);
            EXPECT_EQ(d.H_tilde[s.index(0, a, b)], 0.25);
            std::size_t q = s.index(1, a, b);
            EXPECT_LT(std::abs(d.F[q] - d.E[q]), 1e-6 * std::abs(d.E[q]));
        }
    for (double t : {4.0, 25.0, 100.0}) EXPECT_NEAR(errfn_difference(-t, t), 0.5 - errfn(-std::sqrt(t)), 1e-14);
    EXPECT_NEAR(errfn_difference(-100.0, 100.0), 0.5, 1e-12);
    // analytic t- and y-derivatives against centered differences
    for (double z : {-3.0, 0.0, 1.2})
        for (double t : {0.7, 2.0}) {
            const double e = 1e-5;
            EXPECT_NEAR(errfn_difference_dt(z, t), (errfn_difference(z, t + e) - errfn_difference(z, t - e)) / (2 * e), 1e-7);
            EXPECT_NEAR(errfn_difference_dy(z, t), -(errfn_difference(z + e, t) - errfn_difference(z - e, t)) / (2 * e), 1e-7);
        }
}

TEST(BoundFit, RecoversSyntheticTemplates) {
    const double eta0 = 0.08;
    for (const char* id : {"tilde_G", "tilde_G_y", "tilde_H", "tilde_H_y", "e_bounds", "e_t_bounds", "e_tilde_t"}) {
        auto ts = template_spec(id);
        BoundFit truth;
        truth.eta0 = eta0;
        truth.C = 1.0;
        truth.C1 = 1.0;
        truth.C2 = 0.0;
        truth.C0 = 2.0;
        truth.M = 8.0;
        std::vector<BoundSample> samples;
        for (double t : {0.1, 0.3, 1.0, 3.0, 10.0})
            for (double x = -6; x <= 6; x += 1.5)
                for (double y : {-2.0, 0.0, 1.0}) {
                    BoundSample s{t, x, y, 0};
                    s.q = template_value(ts, truth, s);
                    samples.push_back(s);
                }
        auto fit = fit_pointwise_bound(ts, samples, eta0);
        EXPECT_NEAR(ts.kind == TemplateKind::two_term ? fit.C1 : fit.C, 1.0, 1e-10) << id;
        if (ts.kind == TemplateKind::two_term) {
            EXPECT_NEAR(fit.C2, 0.0, 1e-10) << id;
            EXPECT_EQ(fit.C0, 2.0) << id;
        }
        if (ts.kind == TemplateKind::gaussian || ts.kind == TemplateKind::errfn_pair) EXPECT_EQ(fit.M, 8.0) << id;
        EXPECT_NEAR(fit.sup_ratio, 1.0, 1e-10) << id;
    }
    EXPECT_THROW(template_spec("nope"), Error);
}

TEST(BoundFit, ZeroSamplesGiveZeroConstant) {
    std::vector<BoundSample> samples{{1.0, 0.0, 0.0, 0.0}, {2.0, 1.0, 0.0, 0.0}};
    auto fit = fit_pointwise_bound(template_spec("tilde_H"), samples, 0.1);
    EXPECT_EQ(fit.C, 0.0);
    EXPECT_TRUE(fit.pass);
}

namespace {

/// Bistable kernel with y-derivative on the doubled default sample box.
const KernelSamples& doubled_box_kernel() {
    static const KernelSamples s = [] {
        const auto& g = front().p.grid;
        auto big = SampleBox{}.doubled();
        return bistable_contour(0.1).kernel(big.x_nodes(g), big.y_nodes(g), big.times(), true);
    }();
    return s;
}

}  // namespace

TEST(BoundFit, ResolvedSamplesDropRoundOff) {
    std::vector<BoundSample> s{{0.1, 0.0, 0.0, 2.0}, {0.1, 30.0, 0.0, 1e-14}, {1.0, 3.0, 0.0, 1e-6}, {1.0, 4.0, 0.0, 0.0}};
    auto r = resolved_samples(s, 1e-8);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].q, 2.0);
    EXPECT_EQ(r[1].q, 1e-6);
    // the floor never drops below tol in absolute terms
    std::vector<BoundSample> small{{1.0, 0.0, 0.0, 1e-3}, {1.0, 1.0, 0.0, 5e-9}};
    EXPECT_EQ(resolved_samples(small, 1e-8).size(), 1u);
    // a pure Gaussian cannot cover a round-off sample far down its tail
    auto ts = template_spec("tilde_H");
    auto fit = fit_pointwise_bound(ts, r, 0.08);
    auto noisy = fit_pointwise_bound(ts, s, 0.08);
    EXPECT_LT(template_size(ts, fit), template_size(ts, noisy));
}

TEST(BoundFit, BistableTildeHRefinementStable) {
    const auto& f = front();
    auto pole = pole_part(f.p, f.sd);
    SampleBox box;
    const auto& s = doubled_box_kernel();
    auto d = decompose(s, f.p, pole);
    for (const char* id : {"tilde_H", "tilde_H_y"}) {
        auto ts = template_spec(id);
        auto sf = resolved_samples(kernel_bound_samples(s, f.p, std::string(id) == "tilde_H" ? d.H_tilde : d.H_tilde_y), 1e-8);
        auto sb = restrict_samples(sf, box);
        auto fb = fit_pointwise_bound(ts, sb, f.sd.eta0);
        auto ff = fit_pointwise_bound(ts, sf, f.sd.eta0);
        check_refinement(ts, fb, ff, sf);
        EXPECT_LE(fb.sup_ratio, 1 + 1e-9) << id;
        EXPECT_TRUE(fb.pass) << id << " M " << fb.M << "/" << ff.M << " change " << fb.refined_change << " ratio " << fb.refined_ratio;
    }
}

TEST(BoundFit, BistableTildeGRefinementStable) {
    const auto& f = front();
    auto pole = pole_part(f.p, f.sd);
    SampleBox box;
    const auto& s = doubled_box_kernel();
    auto d = decompose_first(s, f.p, pole);
    for (const char* id : {"tilde_G", "tilde_G_y"}) {
        auto ts = template_spec(id);
        auto sf = kernel_bound_samples(s, f.p, std::string(id) == "tilde_G" ? d.G_tilde : d.G_tilde_y);
        auto sb = restrict_samples(sf, box);
        ASSERT_LT(sb.size(), sf.size());
        auto fb = fit_pointwise_bound(ts, sb, f.sd.eta0);
        auto ff = fit_pointwise_bound(ts, sf, f.sd.eta0);
        check_refinement(ts, fb, ff, sf);
        EXPECT_TRUE(std::isfinite(fb.C1 + fb.C2)) << id;
        EXPECT_LE(fb.sup_ratio, 1 + 1e-9) << id;
        EXPECT_TRUE(fb.pass) << id << " C1 " << fb.C1 << "/" << ff.C1 << " C2 " << fb.C2 << "/" << ff.C2 << " C0 " << fb.C0 << "/" << ff.C0 << " change " << fb.refined_change << " ratio " << fb.refined_ratio;
    }
}

TEST(BoundFit, TildeGyShortTimeScaling) {
    const auto& f = front();
    const auto& gc = bistable_contour(0.1);
    const auto& g = f.p.grid;
    auto xi = node_range(g, -2.5, 2.5, 0.02);
    auto yj = nodes_at(g, {0.0});
    std::vector<double> ts{0.1, 0.14, 0.2, 0.28, 0.4};
    auto s = gc.kernel(xi, yj, ts, true);
    auto d = decompose_first(s, f.p, pole_part(f.p, f.sd));
    std::vector<double> lt, ls;
    for (std::size_t k = 0; k < ts.size(); ++k) {
        double m = 0;
        for (std::size_t a = 0; a < xi.size(); ++a) m = std::max(m, std::abs(d.G_tilde_y[s.index(k, a, 0)]));
        lt.push_back(std::log(ts[k]));
        ls.push_back(std::log(m));
    }
    EXPECT_NEAR(linear_regression(lt, ls).slope, -1.0, 0.15);
}

TEST(NashAronson, GaussianShapeAtShortTimes) {
    const auto& f = front();
    const auto& gc = bistable_contour(0.1);
    const auto& g = f.p.grid;
    auto xi = node_range(g, -8, 8, 0.1);
    auto yj = nodes_at(g, {0.0});
    auto s = gc.kernel(xi, yj, {0.1, 0.2, 0.4, 0.7, 1.0});
    auto na = nash_aronson_check(s, f.p);
    EXPECT_TRUE(na.pass) << na.min_r2;
    for (double sl : na.slope) EXPECT_NEAR(sl, -0.25, 0.05);
}

TEST(LpKernel, DecayRatesAndZeroInput) {
    const auto& f = front();
    const auto& gc = bistable_contour(0.5);
    std::vector<double> ts{0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0};
    auto rep = lp_kernel_checks(gc, f.p, f.sd, ts, {1.0, 2.0, INFINITY});
    EXPECT_EQ(rep.zero_input_max, 0.0);
    EXPECT_LT(rep.u_bar_prime_residual, 1e-3);
    for (const auto& c : rep.checks) {
        EXPECT_TRUE(c.pass) << c.kernel << " " << c.h_name << " p=" << c.p << " rate " << c.measured_rate;
        if (c.kernel == "tilde_H" && c.h_name == "gaussian" && std::isinf(c.p)) EXPECT_LE(c.t_exponent, -0.4);
    }
    EXPECT_TRUE(rep.pass);
}
