#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "frontstab/error.hpp"

namespace frontstab {

/// f: R^n -> R^n written into out.
using VectorField = std::function<void(std::span<const double> u, std::span<double> out)>;
/// Df: R^n -> R^{n x n}, column-major into out.
using JacobianField = std::function<void(std::span<const double> u, std::span<double> out)>;

/// One monomial c * prod_j u_j^{p_j}.
struct PolyTerm {
    double coef = 0.0;
    std::vector<int> powers;
};

/// Reaction-diffusion system u_t = u_xx + f(u).
struct ReactionSystem {
    std::string name;
    int n = 1;
    VectorField f;
    JacobianField df;  ///< empty: centered finite differences are used
    Eigen::VectorXd u_minus;
    Eigen::VectorXd u_plus;
    /// Polynomial coefficients per component when the system is polynomial (empty otherwise).
    std::vector<std::vector<PolyTerm>> poly;
};

/// Spectral data of Df at the end states.
struct EndStateSpectrum {
    Eigen::VectorXcd sigma_plus, sigma_minus;
    Eigen::VectorXcd gamma_plus, gamma_minus;  ///< principal sqrt(-sigma)
    Eigen::MatrixXcd right_plus, right_minus;  ///< right eigenvectors (columns)
    Eigen::MatrixXcd left_plus, left_minus;    ///< left eigenvectors (rows), left * right = I
    double eta_prime = 0.0;
};

inline constexpr double kEpsStab = 1e-8;
inline constexpr double kRestTol = 1e-12;

namespace detail {

inline void require_finite(std::span<const double> u, const char* what) {
    for (double x : u)
        if (!std::isfinite(x)) fail(ErrorKind::invalid_argument, std::string(what) + ": non-finite state");
}

inline double ipow(double x, int p) {
    double r = 1.0;
    for (int k = 0; k < p; ++k) r *= x;
    return r;
}

}  // namespace detail

/// f(u) without argument checks; out must have size n.
inline void eval_reaction_into(const ReactionSystem& sys, std::span<const double> u, std::span<double> out) {
    sys.f(u, out);
}

/// Df(u), analytic when provided, otherwise centered finite differences with step eps^{1/3} max(1,|u_j|).
inline void eval_jacobian_into(const ReactionSystem& sys, std::span<const double> u, std::span<double> out) {
    const int n = sys.n;
    if (sys.df) {
        sys.df(u, out);
        return;
    }
    std::vector<double> up(u.begin(), u.end()), fp(n), fm(n);
    const double e3 = std::cbrt(std::numeric_limits<double>::epsilon());
    for (int j = 0; j < n; ++j) {
        double hj = e3 * std::max(1.0, std::abs(u[j]));
        double save = up[j];
        up[j] = save + hj;
        double hp = up[j] - save;
        sys.f(up, fp);
        up[j] = save - hj;
        double hm = save - up[j];
        sys.f(up, fm);
        up[j] = save;
        for (int i = 0; i < n; ++i) out[i + j * n] = (fp[i] - fm[i]) / (hp + hm);
    }
}

inline Eigen::VectorXd eval_reaction(const ReactionSystem& sys, const Eigen::VectorXd& u) {
    require(u.size() == sys.n, ErrorKind::invalid_argument, "state dimension mismatch");
    detail::require_finite({u.data(), static_cast<std::size_t>(u.size())}, "eval_reaction");
    Eigen::VectorXd out(sys.n);
    sys.f({u.data(), static_cast<std::size_t>(u.size())}, {out.data(), static_cast<std::size_t>(sys.n)});
    return out;
}

inline Eigen::MatrixXd eval_jacobian(const ReactionSystem& sys, const Eigen::VectorXd& u) {
    require(u.size() == sys.n, ErrorKind::invalid_argument, "state dimension mismatch");
    detail::require_finite({u.data(), static_cast<std::size_t>(u.size())}, "eval_jacobian");
    Eigen::MatrixXd out(sys.n, sys.n);
    eval_jacobian_into(sys, {u.data(), static_cast<std::size_t>(u.size())},
                       {out.data(), static_cast<std::size_t>(sys.n * sys.n)});
    return out;
}

/// Finite-difference Jacobian regardless of whether an analytic one exists.
inline Eigen::MatrixXd fd_jacobian(const ReactionSystem& sys, const Eigen::VectorXd& u) {
    ReactionSystem copy = sys;
    copy.df = nullptr;
    return eval_jacobian(copy, u);
}

/// Builds f and Df closures from polynomial coefficients.
inline ReactionSystem make_polynomial_system(std::string name, std::vector<std::vector<PolyTerm>> terms,
                                             Eigen::VectorXd u_minus, Eigen::VectorXd u_plus) {
    const int n = static_cast<int>(terms.size());
    require(n >= 1 && n <= 3, ErrorKind::invalid_argument, "polynomial systems support 1 <= n <= 3");
    require(u_minus.size() == n && u_plus.size() == n, ErrorKind::invalid_argument,
            "end states must have dimension n");
    for (auto& comp : terms)
        for (auto& t : comp) {
            require(static_cast<int>(t.powers.size()) == n, ErrorKind::invalid_argument,
                    "polynomial term needs one power per component");
            for (int p : t.powers) require(p >= 0, ErrorKind::invalid_argument, "negative power");
        }
    ReactionSystem sys;
    sys.name = std::move(name);
    sys.n = n;
    sys.u_minus = std::move(u_minus);
    sys.u_plus = std::move(u_plus);
    sys.poly = terms;
    sys.f = [terms, n](std::span<const double> u, std::span<double> out) {
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (const auto& t : terms[i]) {
                double m = t.coef;
                for (int j = 0; j < n; ++j) m *= detail::ipow(u[j], t.powers[j]);
                s += m;
            }
            out[i] = s;
        }
    };
    sys.df = [terms, n](std::span<const double> u, std::span<double> out) {
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < n; ++k) {
                double s = 0.0;
                for (const auto& t : terms[i]) {
                    if (t.powers[k] == 0) continue;
                    double m = t.coef * t.powers[k];
                    for (int j = 0; j < n; ++j) m *= detail::ipow(u[j], t.powers[j] - (j == k ? 1 : 0));
                    s += m;
                }
                out[i + k * n] = s;
            }
    };
    return sys;
}

/// Cubic bistable f(u) = u(1-u)(u-a) = -u^3 + (1+a)u^2 - a u, connecting u- = 1 to u+ = 0.
inline ReactionSystem bistable_system(double a = 0.5) {
    std::vector<std::vector<PolyTerm>> t{{{-1.0, {3}}, {1.0 + a, {2}}, {-a, {1}}}};
    return make_polynomial_system("bistable", t, Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1));
}

/// Linear decay f(u) = -c u; both end states are 0.
inline ReactionSystem linear_system(double c = 1.0) {
    std::vector<std::vector<PolyTerm>> t{{{-c, {1}}}};
    return make_polynomial_system("linear", t, Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1));
}

namespace detail {

inline void side_spectrum(const ReactionSystem& sys, const Eigen::VectorXd& u, Eigen::VectorXcd& sigma,
                          Eigen::VectorXcd& gamma, Eigen::MatrixXcd& right, Eigen::MatrixXcd& left) {
    Eigen::MatrixXd J = eval_jacobian(sys, u);
    Eigen::EigenSolver<Eigen::MatrixXd> es(J, true);
    require(es.info() == Eigen::Success, ErrorKind::assumption_violated, "end-state eigensolve failed");
    sigma = es.eigenvalues();
    right = es.eigenvectors();
    // deterministic order: by real part, then imaginary part
    std::vector<int> idx(sigma.size());
    for (int i = 0; i < sigma.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (sigma[a].real() != sigma[b].real()) return sigma[a].real() > sigma[b].real();
        return sigma[a].imag() > sigma[b].imag();
    });
    Eigen::VectorXcd s2(sigma.size());
    Eigen::MatrixXcd r2(right.rows(), right.cols());
    for (int i = 0; i < sigma.size(); ++i) {
        s2[i] = sigma[idx[i]];
        r2.col(i) = right.col(idx[i]);
    }
    sigma = s2;
    right = r2;
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(right);
    require(lu.isInvertible(), ErrorKind::assumption_violated, "end-state Jacobian is not diagonalizable");
    left = lu.inverse();
    gamma.resize(sigma.size());
    for (int i = 0; i < sigma.size(); ++i) gamma[i] = std::sqrt(-sigma[i]);
}

}  // namespace detail

/// Eigenvalues of Df(u+-), spatial rates gamma = sqrt(-sigma) and eta' = min Re gamma.
inline EndStateSpectrum end_state_spectrum(const ReactionSystem& sys) {
    for (const Eigen::VectorXd* u : {&sys.u_minus, &sys.u_plus}) {
        Eigen::VectorXd fu = eval_reaction(sys, *u);
        require(fu.cwiseAbs().maxCoeff() < 1e-10, ErrorKind::assumption_violated, "end state is not a rest point");
    }
    EndStateSpectrum s;
    detail::side_spectrum(sys, sys.u_plus, s.sigma_plus, s.gamma_plus, s.right_plus, s.left_plus);
    detail::side_spectrum(sys, sys.u_minus, s.sigma_minus, s.gamma_minus, s.right_minus, s.left_minus);
    double eta = std::numeric_limits<double>::infinity();
    for (const Eigen::VectorXcd* sg : {&s.sigma_plus, &s.sigma_minus})
        for (int i = 0; i < sg->size(); ++i)
            if ((*sg)[i].real() >= -kEpsStab)
                fail(ErrorKind::assumption_violated, "end state is not strictly stable (Re sigma >= -eps)");
    for (const Eigen::VectorXcd* gm : {&s.gamma_plus, &s.gamma_minus})
        for (int i = 0; i < gm->size(); ++i) eta = std::min(eta, (*gm)[i].real());
    s.eta_prime = eta;
    return s;
}

}  // namespace frontstab
