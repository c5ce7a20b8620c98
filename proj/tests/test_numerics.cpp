#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>
#include <Eigen/Dense>

#include "frontstab/numerics.hpp"

using namespace frontstab;

// Frozen from errfn_quadrature(1.0) (adaptive Gauss-Kronrod, tol 1e-14).
constexpr double kErrfnOne = 0.92135039647485758;

TEST(Errfn, KnownValues) {
    EXPECT_DOUBLE_EQ(errfn(0.0), 0.5);
    EXPECT_DOUBLE_EQ(errfn(INFINITY), 1.0);
    EXPECT_NEAR(errfn(40.0), 1.0, 1e-300);
    EXPECT_NEAR(errfn(1.0), kErrfnOne, 1e-14);
    EXPECT_NEAR(errfn_quadrature(1.0), kErrfnOne, 1e-12);
}

TEST(Errfn, MatchesQuadratureOracle) {
    for (double x = -6.0; x <= 6.0; x += 0.37) EXPECT_NEAR(errfn(x), errfn_quadrature(x), 1e-12) << x;
}

TEST(Errfn, Symmetry) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(-6.0, 6.0);
    for (int k = 0; k < 50; ++k) {
        double x = d(rng);
        EXPECT_NEAR(errfn(x) + errfn(-x), 1.0, 1e-12);
    }
}

TEST(Errfn, Monotone) {
    double prev = 0.0;
    for (double x = -10.0; x <= 10.0; x += 0.01) {
        double v = errfn(x);
        EXPECT_GE(v, prev);
        prev = v;
    }
}

TEST(Errfn, ErfcUpperBound) {
    EXPECT_TRUE(erfc_upper_check(0.0));
    EXPECT_TRUE(erfc_upper_check(1.0));
    EXPECT_TRUE(erfc_upper_check(3.0));
    // erfc(1) ~ 0.157299 from the same quadrature
    EXPECT_NEAR(erfc_quadrature(1.0), 0.15729920705028513, 1e-12);
    EXPECT_THROW(erfc_upper_check(-1.0), Error);
    for (double x = 0.0; x < 8.0; x += 0.25) EXPECT_TRUE(erfc_upper_check(x)) << x;
}

TEST(GaussianKernel, Values) {
    GaussianKernelSpec s{4.0};
    EXPECT_DOUBLE_EQ(gaussian_kernel(s, 0.0, 1.0), 1.0);
    EXPECT_NEAR(gaussian_kernel(s, 2.0, 1.0), std::exp(-1.0), 1e-15);
    EXPECT_THROW(gaussian_kernel(s, 0.0, 0.0), Error);
}

TEST(GaussianKernel, SemigroupIdentity) {
    const double M = 4.0, t1 = 0.7, t2 = 1.3;
    GaussianKernelSpec s{M};
    Grid1D g(-40.0, 40.0, 8001);
    const double h = g.h();
    std::vector<double> k1(g.N), k2(g.N);
    for (std::size_t i = 0; i < g.N; ++i) {
        k1[i] = gaussian_kernel(s, g.x(i), t1);
        k2[i] = gaussian_kernel(s, g.x(i), t2);
    }
    double err = 0.0, ref = 0.0;
    for (double x = -6.0; x <= 6.0; x += 0.5) {
        double conv = 0.0;
        for (std::size_t j = 0; j < g.N; ++j) conv += k1[j] * gaussian_kernel(s, x - g.x(j), t2) * h;
        double target = std::sqrt(std::numbers::pi * M) * gaussian_kernel(s, x, t1 + t2);
        err = std::max(err, std::abs(conv - target));
        ref = std::max(ref, std::abs(target));
    }
    EXPECT_LT(err / ref, 1e-4);
}

TEST(GaussianKernel, MassIdentity) {
    for (double t : {0.5, 1.0, 4.0}) {
        for (double M : {2.0, 8.0}) {
            double R = 9.0 * std::sqrt(M * t);
            Grid1D g(-R, R, 4001);
            std::vector<double> v(g.N), w(g.N);
            for (std::size_t i = 0; i < g.N; ++i) {
                v[i] = gaussian_kernel({M}, g.x(i), t);
                w[i] = v[i] * std::sqrt(t);
            }
            // the t^{-1/2} prefactor cancels the sqrt(t) width: mass of K_M is sqrt(pi M)
            EXPECT_NEAR(trapezoid(v, g.h()) / std::sqrt(std::numbers::pi * M), 1.0, 1e-6);
            EXPECT_NEAR(trapezoid(w, g.h()) / std::sqrt(std::numbers::pi * M * t), 1.0, 1e-6);
        }
    }
}

TEST(Norms, Basic) {
    Grid1D g(0.0, 1.0, 101);
    std::vector<double> one(g.N, 1.0);
    EXPECT_NEAR(discrete_lp_norm(one, g.h(), 1.0), 1.0, 1e-14);
    EXPECT_NEAR(discrete_lp_norm(one, g.h(), INFINITY), 1.0, 0.0);
    EXPECT_NEAR(discrete_lp_norm(one, g.h(), 2.0), 1.0, 1e-14);
    EXPECT_THROW(discrete_lp_norm(one, g.h(), 0.5), Error);
}

TEST(Norms, ExponentialL1ConvergesSecondOrder) {
    double exact = 2.0 * (1.0 - std::exp(-20.0));
    double prev_err = 0.0;
    for (std::size_t N : {401u, 801u, 1601u}) {
        Grid1D g(-20.0, 20.0, N);
        std::vector<double> v(N);
        for (std::size_t i = 0; i < N; ++i) v[i] = std::exp(-std::abs(g.x(i)));
        double err = std::abs(discrete_lp_norm(v, g.h(), 1.0) - exact);
        EXPECT_LT(err, 1e-2);
        if (prev_err > 0) EXPECT_NEAR(prev_err / err, 4.0, 0.3);
        prev_err = err;
    }
}

TEST(SecondDifference, ExactOnQuadratics) {
    Grid1D g(-1.0, 2.0, 31);
    auto D = second_difference_operator(g);
    std::vector<double> c(g.N, 3.0), q(g.N);
    for (std::size_t i = 0; i < g.N; ++i) q[i] = g.x(i) * g.x(i);
    auto dc = D.apply(c), dq = D.apply(q);
    for (std::size_t i = 1; i + 1 < g.N; ++i) {
        EXPECT_NEAR(dc[i], 0.0, 1e-9);
        EXPECT_NEAR(dq[i], 2.0, 1e-9);
    }
}

TEST(SecondDifference, SecondOrderConvergence) {
    auto err_for = [](std::size_t N) {
        Grid1D g(0.0, 3.0, N);
        auto D = second_difference_operator(g);
        std::vector<double> s(N);
        for (std::size_t i = 0; i < N; ++i) s[i] = std::sin(g.x(i));
        auto d = D.apply(s);
        double e = 0;
        for (std::size_t i = 1; i + 1 < N; ++i) e = std::max(e, std::abs(d[i] + std::sin(g.x(i))));
        return e;
    };
    double r = err_for(101) / err_for(201);
    EXPECT_NEAR(r, 4.0, 0.1);
}

TEST(SecondDifference, FourthOrderStencil) {
    auto err_for = [](std::size_t N) {
        Grid1D g(0.0, 3.0, N);
        auto D = second_difference_operator(g, 1, 4);
        std::vector<double> s(N);
        for (std::size_t i = 0; i < N; ++i) s[i] = std::sin(g.x(i));
        auto d = D.apply(s);
        double e = 0;
        for (std::size_t i = 2; i + 2 < N; ++i) e = std::max(e, std::abs(d[i] + std::sin(g.x(i))));
        return e;
    };
    EXPECT_NEAR(err_for(51) / err_for(101), 16.0, 0.5);
}

class SecondDifferenceOrder : public ::testing::TestWithParam<int> {};

TEST_P(SecondDifferenceOrder, SymmetricNegativeDefinite) {
    Grid1D g(0.0, 1.0, 40);
    auto D = second_difference_operator(g, 1, GetParam());
    Eigen::MatrixXd A(g.N, g.N);
    for (std::size_t i = 0; i < g.N; ++i)
        for (std::size_t j = 0; j < g.N; ++j) A(i, j) = D.get(i, j);
    EXPECT_LT((A - A.transpose()).norm(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
    EXPECT_LT(es.eigenvalues().maxCoeff(), 0.0);
}

INSTANTIATE_TEST_SUITE_P(Orders, SecondDifferenceOrder, ::testing::Values(2, 4));

TEST(BandedLU, MatchesDenseSolveComplex) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> d;
    const std::size_t n = 30, kl = 2, ku = 3;
    BandMatrix<cd> A(n, kl, ku);
    Eigen::MatrixXcd dense = Eigen::MatrixXcd::Zero(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = (i >= kl ? i - kl : 0); j <= std::min(n - 1, i + ku); ++j) {
            cd v(d(rng), d(rng));
            A(i, j) = v;
            dense(i, j) = v;
        }
    std::vector<cd> b(n);
    Eigen::VectorXcd be(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = be[i] = cd(d(rng), d(rng));
    auto x = BandedLU<cd>(A).solve(b);
    Eigen::VectorXcd xe = dense.partialPivLu().solve(be);
    for (std::size_t i = 0; i < n; ++i) EXPECT_LT(std::abs(x[i] - xe[i]), 1e-10);
}

TEST(BandedLU, SingularDetected) {
    BandMatrix<double> A(4, 1, 1);
    EXPECT_THROW(BandedLU<double>{A}, Error);
}

TEST(Interpolation, HermiteCubicExact) {
    Grid1D g(-2.0, 2.0, 21);
    std::vector<double> f(g.N), fp(g.N);
    for (std::size_t i = 0; i < g.N; ++i) {
        double x = g.x(i);
        f[i] = x * x * x - 2 * x;
        fp[i] = 3 * x * x - 2;
    }
    for (double x = -1.93; x < 1.9; x += 0.111) {
        double dv;
        double v = hermite_eval(g, f, fp, x, &dv);
        EXPECT_NEAR(v, x * x * x - 2 * x, 1e-12);
        EXPECT_NEAR(dv, 3 * x * x - 2, 1e-11);
    }
}

TEST(Quadrature, GaussLegendreExactForPolynomials) {
    const auto& gl = GaussLegendre16::get();
    ASSERT_EQ(gl.nodes.size(), 16u);
    double s = 0;
    for (std::size_t i = 0; i < 16; ++i) s += gl.weights[i] * std::pow(gl.nodes[i], 30);
    EXPECT_NEAR(s, 2.0 / 31.0, 1e-14);
}

TEST(Cutoff, Plateaus) {
    EXPECT_EQ(cutoff_chi(0.5), 0.0);
    EXPECT_EQ(cutoff_chi(3.0), 1.0);
    EXPECT_DOUBLE_EQ(cutoff_chi(1.5), 0.5);
    for (double t = 1.01; t < 2.0; t += 0.05) {
        double fd = (cutoff_chi(t + 1e-6) - cutoff_chi(t - 1e-6)) / 2e-6;
        EXPECT_NEAR(cutoff_chi_prime(t), fd, 1e-6);
        double fd2 = (cutoff_chi_prime(t + 1e-6) - cutoff_chi_prime(t - 1e-6)) / 2e-6;
        EXPECT_NEAR(cutoff_chi_second(t), fd2, 1e-5);
    }
    EXPECT_EQ(cutoff_chi_second(0.5), 0.0);
    EXPECT_EQ(cutoff_chi_second(2.5), 0.0);
}
