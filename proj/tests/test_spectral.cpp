#include <chrono>
#include <cmath>

#include <gtest/gtest.h>

#include "frontstab/spectral.hpp"

using namespace frontstab;

namespace {

const FrontProfile& default_profile() {
    static const FrontProfile p = solve_profile(bistable_system(), Grid1D(-30, 30, 3001), {1e-8});
    return p;
}

struct Computed {
    SpectralData sd;
    double seconds;
};

const Computed& default_spectrum() {
    static const Computed c = [] {
        auto t0 = std::chrono::steady_clock::now();
        auto sys = bistable_system();
        const auto& p = default_profile();
        auto op = assemble_linearization(sys, p);
        auto sd = check_spectral_assumption(op, p, end_state_spectrum(sys));
        return Computed{sd, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    }();
    return c;
}

// Bound states of d_xx + V0 sech^2(x/a) - 1/2 with V0 a^2 = s(s+1): kappa_m = (s - m)/a.
std::vector<double> poschl_teller_levels() {
    const double a = 2 * std::sqrt(2.0), V0 = 0.75;
    const double s = 0.5 * (-1 + std::sqrt(1 + 4 * V0 * a * a));
    std::vector<double> out;
    for (int m = 0; m < s; ++m) out.push_back(std::pow((s - m) / a, 2) - 0.5);
    return out;
}

}  // namespace

TEST(Spectral, OperatorIsSymmetricForScalarFront) {
    auto sys = bistable_system();
    auto op = assemble_linearization(sys, default_profile());
    EXPECT_TRUE(op.symmetric);
    EXPECT_EQ(op.matrix.size(), default_profile().grid.N);
    for (std::size_t i = 2; i + 2 < op.matrix.size(); i += 97)
        for (std::size_t j = i - 2; j <= i + 2; ++j) EXPECT_DOUBLE_EQ(op.matrix.get(i, j), op.matrix.get(j, i));
}

TEST(Spectral, OperatorAnnihilatesProfileDerivative) {
    // L u_bar' is the derivative of the profile residual, so it is small in the interior
    auto sys = bistable_system();
    const auto& p = default_profile();
    auto op = assemble_linearization(sys, p);
    auto r = op.matrix.apply(std::span<const double>(p.u_bar_prime));
    double worst = 0;
    for (std::size_t i = 0; i < p.grid.N; ++i)
        if (std::abs(p.grid.x(i)) < 20) worst = std::max(worst, std::abs(r[i]));
    EXPECT_LT(worst, 1e-6);
}

TEST(Spectral, ZeroModeAndGap) {
    const auto& c = default_spectrum();
    const auto& sd = c.sd;
    EXPECT_LT(std::abs(sd.zero_eig), 1e-6);
    EXPECT_GT(sd.cosine_similarity, 0.999);
    EXPECT_GT(sd.eta, 0.3);
    EXPECT_LT(sd.biorthogonality, 1e-6);
    EXPECT_LT(c.seconds, 60.0);
}

TEST(Spectral, DiscreteLevelsMatchPoschlTeller) {
    const auto& sd = default_spectrum().sd;
    auto levels = poschl_teller_levels();
    ASSERT_EQ(levels.size(), 2u);
    EXPECT_NEAR(levels[0], 0.0, 1e-14);
    EXPECT_NEAR(sd.lambda1, levels[1], 1e-5);
    EXPECT_NEAR(sd.eta, -levels[1], 1e-5);
    EXPECT_NEAR(sd.essential_edge, -0.5, 1e-12);
    EXPECT_NEAR(sd.eta_prime, std::sqrt(0.5), 1e-12);
    EXPECT_NEAR(sd.eta0, 0.9 * std::min(sd.eta / 4, sd.eta_prime), 1e-15);
    // above the essential edge only the two bound states remain, both strongly localized
    int above = 0;
    for (Eigen::Index k = 0; k < sd.eigenvalues.size(); ++k)
        if (sd.eigenvalues[k].real() > sd.essential_edge) {
            ++above;
            EXPECT_TRUE(sd.discrete[static_cast<std::size_t>(k)]);
            EXPECT_LT(sd.participation[static_cast<std::size_t>(k)], 1e-3);
        }
    EXPECT_EQ(above, 2);
}

TEST(Spectral, EigenvaluesAreRealAndBelowZero) {
    const auto& sd = default_spectrum().sd;
    for (Eigen::Index k = 0; k < sd.eigenvalues.size(); ++k) {
        EXPECT_EQ(sd.eigenvalues[k].imag(), 0.0);
        if (k != sd.zero_index) EXPECT_LT(sd.eigenvalues[k].real(), 0.0);
    }
    for (Eigen::Index k = 1; k < sd.eigenvalues.size(); ++k)
        EXPECT_GE(sd.eigenvalues[k - 1].real(), sd.eigenvalues[k].real());
}

TEST(Spectral, AdjointModeIsNormalizedDerivativeForScalar) {
    const auto& sd = default_spectrum().sd;
    const auto& p = default_profile();
    double nrm2 = 0;
    for (std::size_t i = 0; i < p.grid.N; ++i) nrm2 += trapezoid_weight(i, p.grid.N, p.grid.h()) * p.up(i) * p.up(i);
    double worst = 0, scale = 0;
    for (std::size_t i = 0; i < p.grid.N; ++i) {
        worst = std::max(worst, std::abs(sd.psi_tilde[i] - p.up(i) / nrm2));
        scale = std::max(scale, std::abs(p.up(i) / nrm2));
    }
    EXPECT_LT(worst / scale, 1e-6);
    double ip = 0;
    for (std::size_t i = 0; i < p.grid.N; ++i) ip += trapezoid_weight(i, p.grid.N, p.grid.h()) * sd.psi_tilde[i] * p.up(i);
    EXPECT_NEAR(ip, 1.0, 1e-12);
}

TEST(Spectral, RejectsPositiveSpectrum) {
    // f = +u about u = 0: the whole continuum sits to the right of zero
    auto sys = make_polynomial_system("growth", {{{1.0, {1}}}}, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1));
    FrontProfile p;
    p.grid = Grid1D(-10, 10, 201);
    p.n = 1;
    p.u_bar.assign(p.grid.N, 0.0);
    p.u_bar_prime.assign(p.grid.N, 0.0);
    p.u_minus = p.u_plus = Eigen::VectorXd::Zero(1);
    EndStateSpectrum ends;
    ends.sigma_plus = ends.sigma_minus = Eigen::VectorXcd::Constant(1, cd(1.0));
    auto op = assemble_linearization(sys, p);
    try {
        check_spectral_assumption(op, p, ends);
        FAIL() << "expected assumption-violated";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::assumption_violated);
    }
}

TEST(Spectral, RejectsEta0FactorOutsideUnitInterval) {
    auto sys = bistable_system();
    const auto& p = default_profile();
    auto op = assemble_linearization(sys, p);
    for (double f : {1.0, 0.0, 1.5}) {
        SpectralOptions o;
        o.eta0_factor = f;
        try {
            check_spectral_assumption(op, p, end_state_spectrum(sys), o);
            FAIL() << "expected invalid-argument";
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
        }
    }
}

TEST(Spectral, NonSymmetricSystemUsesDenseSolver) {
    // two decoupled bistable copies with a one-way coupling keep the zero mode simple
    std::vector<std::vector<PolyTerm>> t{{{-1.0, {3, 0}}, {1.5, {2, 0}}, {-0.5, {1, 0}}},
                                         {{-2.0, {0, 1}}, {0.1, {1, 0}}, {-0.1, {2, 0}}}};
    Eigen::VectorXd um(2), up(2);
    um << 1, 0;
    up << 0, 0;
    auto sys = make_polynomial_system("coupled", t, um, up);
    auto p = solve_profile(sys, Grid1D(-25, 25, 401), {1e-8});
    auto op = assemble_linearization(sys, p);
    EXPECT_FALSE(op.symmetric);
    auto sd = check_spectral_assumption(op, p, end_state_spectrum(sys));
    EXPECT_LT(std::abs(sd.zero_eig), 1e-6);
    EXPECT_GT(sd.cosine_similarity, 0.999);
    EXPECT_LT(sd.biorthogonality, 1e-6);
    double ip = 0;
    for (std::size_t i = 0; i < p.grid.N * 2; ++i)
        ip += trapezoid_weight(i / 2, p.grid.N, p.grid.h()) * sd.psi_tilde[i] * p.u_bar_prime[i];
    EXPECT_NEAR(ip, 1.0, 1e-12);
}

TEST(DecayExponents, ScalarExampleAndConjugate) {
    EndStateSpectrum s;
    s.sigma_plus = s.sigma_minus = Eigen::VectorXcd::Constant(1, cd(-1.0));
    s.right_plus = s.right_minus = s.left_plus = s.left_minus = Eigen::MatrixXcd::Identity(1, 1);
    for (cd lam : {cd(-0.5, -1.0), cd(-0.5, 1.0)}) {
        auto m = decay_exponents(s, lam);
        cd expect = std::sqrt(lam + 1.0);  // mu^2 = lambda - sigma
        EXPECT_NEAR(std::abs(m.plus.mu[1] - expect), 0.0, 1e-14);
        EXPECT_NEAR(std::abs(m.plus.mu[0] + expect), 0.0, 1e-14);
        EXPECT_LT(m.plus.mu[0].real(), 0.0);
        EXPECT_GT(m.plus.mu[1].real(), 0.0);
    }
    auto m = decay_exponents(s, cd(-0.5, -1.0));
    EXPECT_NEAR(m.plus.mu[1].real(), 0.8995, 5e-5);
    EXPECT_NEAR(m.plus.mu[1].imag(), -0.5559, 5e-5);
}

TEST(DecayExponents, BranchDegenerate) {
    EndStateSpectrum s;
    s.sigma_plus = s.sigma_minus = Eigen::VectorXcd::Constant(1, cd(-1.0));
    s.right_plus = s.right_minus = s.left_plus = s.left_minus = Eigen::MatrixXcd::Identity(1, 1);
    try {
        decay_exponents(s, cd(-1.0, 0.0));
        FAIL() << "expected branch-degenerate";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::branch_degenerate);
    }
}

TEST(DecayExponents, SplittingAndSmallLambdaExpansion) {
    auto ends = end_state_spectrum(bistable_system());
    for (double lam : {1e-2, 2e-3, 5e-4}) {
        auto m = decay_exponents(ends, cd(lam, 0.5 * lam));
        for (const SideModes* sm : {&m.plus, &m.minus}) {
            EXPECT_NEAR(-sm->mu[0].real(), sm->mu[1].real(), 1e-15);
            cd l(lam, 0.5 * lam);
            cd approx = -sm->gamma[0] - sm->a[0] * l - sm->b[0] * l * l;
            EXPECT_LT(std::abs(sm->mu[0] - approx), 10 * std::pow(std::abs(l), 3));
        }
    }
    auto m0 = decay_exponents(ends, cd(0.0, 0.0));
    EXPECT_GE(-m0.plus.mu[0].real(), ends.eta_prime - 1e-15);
    EXPECT_GE(-m0.minus.mu[0].real(), ends.eta_prime - 1e-15);
}

TEST(DecayExponents, AdjointPairingIsDiagonal) {
    // Z S W with S = [[0, I], [-I, 0]] pairs adjoint rows with mode columns
    auto ends = end_state_spectrum(bistable_system());
    auto m = decay_exponents(ends, cd(0.3, -0.7));
    for (const SideModes* sm : {&m.plus, &m.minus}) {
        const Eigen::Index n2 = sm->V.rows(), n = n2 / 2;
        Eigen::MatrixXcd S = Eigen::MatrixXcd::Zero(n2, n2);
        S.block(0, n, n, n).setIdentity();
        S.block(n, 0, n, n) = -Eigen::MatrixXcd::Identity(n, n);
        Eigen::MatrixXcd P = sm->Vt * S * sm->V;
        for (Eigen::Index i = 0; i < n2; ++i)
            for (Eigen::Index j = 0; j < n2; ++j)
                EXPECT_NEAR(std::abs(P(i, j) - (i == j ? 2.0 * sm->mu[i] : cd(0))), 0.0, 1e-13);
    }
}
