#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "frontstab/error.hpp"
#include "frontstab/model.hpp"
#include "frontstab/numerics.hpp"

namespace frontstab {

/// Stationary front sampled on a grid. Multi-component fields are stored node-major.
struct FrontProfile {
    Grid1D grid;
    int n = 1;
    std::vector<double> u_bar;
    std::vector<double> u_bar_prime;
    Eigen::VectorXd u_minus, u_plus;
    double tail_rate_plus = 0.0;
    double tail_rate_minus = 0.0;
    double residual_sup = 0.0;
    double speed = 0.0;  ///< phase-condition multiplier; zero for a stationary front
    int newton_iterations = 0;
    int stencil_order = 4;  ///< second-difference stencil shared by every discrete operator built on this profile

    [[nodiscard]] double u(std::size_t i, int c = 0) const { return u_bar[i * n + c]; }
    [[nodiscard]] double up(std::size_t i, int c = 0) const { return u_bar_prime[i * n + c]; }
    /// Single component as a contiguous vector.
    [[nodiscard]] std::vector<double> component(int c, bool derivative = false) const {
        std::vector<double> out(grid.N);
        const auto& src = derivative ? u_bar_prime : u_bar;
        for (std::size_t i = 0; i < grid.N; ++i) out[i] = src[i * n + c];
        return out;
    }
};

struct ProfileOptions {
    double tol = 1e-8;
    double anchor = 0.0;  ///< x position where the first component crosses its midpoint
    int max_iter = 60;
    int stencil_order = 4;
};

namespace detail {

/// Value of node i + k, falling back to the Dirichlet ghost data outside the grid.
inline double ghosted(std::span<const double> U, std::size_t N, int n, long i, int c, const Eigen::VectorXd& um,
                      const Eigen::VectorXd& upl) {
    if (i < 0) return um[c];
    if (i >= static_cast<long>(N)) return upl[c];
    return U[static_cast<std::size_t>(i) * n + c];
}

/// Discrete residual u_xx + f(u) with Dirichlet ghosts u-, u+ (no phase-condition term).
inline std::vector<double> profile_residual(const ReactionSystem& sys, const Grid1D& g, std::span<const double> U,
                                            const Eigen::VectorXd& um, const Eigen::VectorXd& upl, int order = 4) {
    const int n = sys.n;
    const std::size_t N = g.N;
    const double ih2 = 1.0 / (g.h() * g.h());
    const auto st = laplacian_stencil(order);
    std::vector<double> r(n * N), fv(n);
    for (std::size_t i = 0; i < N; ++i) {
        sys.f(U.subspan(i * n, n), fv);
        for (int c = 0; c < n; ++c) {
            double s = 0.0;
            for (int k = -2; k <= 2; ++k)
                if (st[k + 2] != 0.0) s += st[k + 2] * ghosted(U, N, n, static_cast<long>(i) + k, c, um, upl);
            r[i * n + c] = s * ih2 + fv[c];
        }
    }
    return r;
}

}  // namespace detail

/// Log-linear regression of |u - u_end| on the tail window of one half-domain.
/// side = +1 uses [0.65, 0.9] x_max, side = -1 the mirror window; the innermost
/// tenth is skipped to avoid the Dirichlet boundary layer. Points below roundoff are
/// dropped; the window shrinks inward when too few remain.
inline double tail_rate_of(const Grid1D& g, std::span<const double> u, double u_end, int side) {
    const double half = side > 0 ? g.x_max : -g.x_min;
    double lo = 0.65, hi = 0.9;
    for (int attempt = 0; attempt < 8; ++attempt) {
        std::vector<double> xs, ls;
        for (std::size_t i = 0; i < g.N; ++i) {
            double x = g.x(i) * side;
            if (x < lo * half || x > hi * half) continue;
            double d = std::abs(u[i] - u_end);
            if (d <= 1e-13 * std::abs(u_end) || d < 1e-280) continue;
            xs.push_back(x);
            ls.push_back(std::log(d));
        }
        if (xs.size() >= 10 && std::abs(xs.back() - xs.front()) > 0.05 * half) return -linear_regression(xs, ls).slope;
        lo *= 0.5;
        hi *= 0.5;
    }
    fail(ErrorKind::resolution_insufficient, "tail magnitudes underflow in every regression window");
}

/// Tail rates (rate_minus, rate_plus) of the first component.
inline std::pair<double, double> tail_rates(const FrontProfile& p) {
    auto u0 = p.component(0);
    return {tail_rate_of(p.grid, u0, p.u_minus[0], -1), tail_rate_of(p.grid, u0, p.u_plus[0], +1)};
}

/// Fourth-order derivative of the profile samples (second-order at the ends).
inline std::vector<double> profile_derivative(const FrontProfile& p) {
    std::vector<double> out(p.u_bar.size());
    for (int c = 0; c < p.n; ++c) {
        auto d = derivative4(p.component(c), p.grid.h());
        for (std::size_t i = 0; i < p.grid.N; ++i) out[i * p.n + c] = d[i];
    }
    return out;
}

/// Damped Newton on the finite-difference boundary-value problem u_xx + c u_x + f(u) = 0,
/// u(x_min - h) = u-, u(x_max + h) = u+, with the phase condition that the first component
/// crosses its midpoint at the anchor. The multiplier c must vanish for a stationary front.
inline FrontProfile solve_profile(const ReactionSystem& sys, const Grid1D& g, const ProfileOptions& opt = {}) {
    const EndStateSpectrum spec = end_state_spectrum(sys);
    require(opt.tol > 0, ErrorKind::invalid_argument, "profile tolerance must be positive");
    if ((sys.u_minus - sys.u_plus).cwiseAbs().maxCoeff() < 1e-12)
        fail(ErrorKind::no_connection, "end states coincide; no heteroclinic front exists");
    const double reach = std::min(-g.x_min, g.x_max) - std::abs(opt.anchor);
    require(std::exp(-spec.eta_prime * reach) < std::max(opt.tol, 1e-10) * 10.0, ErrorKind::resolution_insufficient,
            "truncation domain too small for the end-state decay rate");

    const int n = sys.n;
    const std::size_t N = g.N;
    const double h = g.h();
    const double ih2 = 1.0 / (h * h);
    const Eigen::VectorXd um = sys.u_minus, upl = sys.u_plus;
    const double mid = 0.5 * (um[0] + upl[0]);
    require(std::abs(upl[0] - um[0]) > 1e-12, ErrorKind::no_connection,
            "first component does not change across the front; anchor undefined");

    // anchor interpolation weights
    double sa = (opt.anchor - g.x_min) / h;
    require(sa >= 1 && sa <= static_cast<double>(N) - 2, ErrorKind::invalid_argument, "anchor outside the grid");
    auto ka = static_cast<std::size_t>(std::floor(sa));
    double wa1 = sa - static_cast<double>(ka), wa0 = 1.0 - wa1;

    std::vector<double> U(n * N);
    for (std::size_t i = 0; i < N; ++i) {
        double s = 0.5 * (1.0 + std::tanh(g.x(i) - opt.anchor));
        for (int c = 0; c < n; ++c) U[i * n + c] = um[c] + (upl[c] - um[c]) * s;
    }
    double cspeed = 0.0;
    const std::size_t M = n * N + 1;
    const auto st = laplacian_stencil(opt.stencil_order);

    auto full_residual = [&](std::span<const double> Uv, double cv) {
        std::vector<double> r = detail::profile_residual(sys, g, Uv, um, upl, opt.stencil_order);
        for (std::size_t i = 0; i < N; ++i)
            for (int c = 0; c < n; ++c) {
                double left = i > 0 ? Uv[(i - 1) * n + c] : um[c];
                double right = i + 1 < N ? Uv[(i + 1) * n + c] : upl[c];
                r[i * n + c] += cv * (right - left) / (2 * h);
            }
        r.push_back(wa0 * Uv[ka * n] + wa1 * Uv[(ka + 1) * n] - mid);
        return r;
    };
    auto norm_inf = [](const std::vector<double>& v) {
        double m = 0;
        for (double x : v) m = std::max(m, std::abs(x));
        return m;
    };

    std::vector<double> r = full_residual(U, cspeed);
    double rn = norm_inf(r);
    int it = 0;
    std::vector<double> J(n * n);
    for (; it < opt.max_iter && rn > 1e-13; ++it) {
        std::vector<Eigen::Triplet<double>> trip;
        trip.reserve(N * n * (n + 4));
        for (std::size_t i = 0; i < N; ++i) {
            eval_jacobian_into(sys, std::span<const double>(U).subspan(i * n, n), J);
            for (int c = 0; c < n; ++c) {
                int row = static_cast<int>(i * n + c);
                for (int b = 0; b < n; ++b) {
                    double v = J[c + b * n] + (b == c ? st[2] * ih2 : 0.0);
                    if (v != 0.0) trip.emplace_back(row, static_cast<int>(i * n + b), v);
                }
                for (int k : {-2, -1, 1, 2}) {
                    long j = static_cast<long>(i) + k;
                    if (j < 0 || j >= static_cast<long>(N)) continue;
                    double v = st[k + 2] * ih2 + (k == 1 ? cspeed / (2 * h) : k == -1 ? -cspeed / (2 * h) : 0.0);
                    if (v != 0.0) trip.emplace_back(row, static_cast<int>(j * n + c), v);
                }
                double left = i > 0 ? U[(i - 1) * n + c] : um[c];
                double right = i + 1 < N ? U[(i + 1) * n + c] : upl[c];
                trip.emplace_back(row, static_cast<int>(M - 1), (right - left) / (2 * h));
            }
        }
        trip.emplace_back(static_cast<int>(M - 1), static_cast<int>(ka * n), wa0);
        trip.emplace_back(static_cast<int>(M - 1), static_cast<int>((ka + 1) * n), wa1);
        Eigen::SparseMatrix<double> A(M, M);
        A.setFromTriplets(trip.begin(), trip.end());
        Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
        lu.compute(A);
        if (lu.info() != Eigen::Success) fail(ErrorKind::no_connection, "Newton Jacobian factorization failed");
        Eigen::VectorXd rhs = Eigen::Map<Eigen::VectorXd>(r.data(), static_cast<Eigen::Index>(M));
        Eigen::VectorXd d = lu.solve(rhs);
        if (lu.info() != Eigen::Success || !d.allFinite()) fail(ErrorKind::no_connection, "Newton solve failed");
        double step = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 30; ++ls, step *= 0.5) {
            std::vector<double> Ut(U);
            for (std::size_t k = 0; k + 1 < M; ++k) Ut[k] -= step * d[static_cast<Eigen::Index>(k)];
            double ct = cspeed - step * d[static_cast<Eigen::Index>(M - 1)];
            auto rt = full_residual(Ut, ct);
            double rtn = norm_inf(rt);
            if (rtn < (1.0 - 1e-4 * step) * rn || (step == 1.0 && rtn < 1e-11)) {
                U = std::move(Ut);
                cspeed = ct;
                r = std::move(rt);
                rn = rtn;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }

    FrontProfile p;
    p.grid = g;
    p.n = n;
    p.u_minus = um;
    p.u_plus = upl;
    p.u_bar = U;
    p.speed = cspeed;
    p.newton_iterations = it;
    p.stencil_order = opt.stencil_order;
    auto res = detail::profile_residual(sys, g, U, um, upl, opt.stencil_order);
    p.residual_sup = norm_inf(res);
    if (!(p.residual_sup < opt.tol) || !(rn < std::max(1e-10, opt.tol)))
        fail(ErrorKind::no_connection, "Newton iteration did not reach the profile tolerance");
    if (std::abs(cspeed) > 1e-6)
        fail(ErrorKind::no_connection, "the connecting front travels (phase multiplier c != 0); no stationary front");
    p.u_bar_prime = profile_derivative(p);
    auto [rm, rp] = tail_rates(p);
    p.tail_rate_minus = rm;
    p.tail_rate_plus = rp;
    return p;
}

/// Constant "profile" u_bar = u- for systems with u- = u+ (constant-coefficient linearizations).
inline FrontProfile rest_state_profile(const ReactionSystem& sys, const Grid1D& g, int stencil_order = 4) {
    require((sys.u_minus - sys.u_plus).cwiseAbs().maxCoeff() < 1e-12, ErrorKind::invalid_argument,
            "rest-state profile needs u- = u+");
    FrontProfile p;
    p.grid = g;
    p.n = sys.n;
    p.u_minus = sys.u_minus;
    p.u_plus = sys.u_plus;
    p.u_bar.resize(g.N * sys.n);
    for (std::size_t i = 0; i < g.N; ++i)
        for (int c = 0; c < sys.n; ++c) p.u_bar[i * sys.n + c] = sys.u_minus[c];
    p.u_bar_prime.assign(g.N * sys.n, 0.0);
    p.stencil_order = stencil_order;
    return p;
}

/// Shooting construction of a scalar stationary front, used as an independent cross-check.
/// Bisects on u'(anchor) so the rightward orbit neither overshoots u+ nor turns back;
/// samples on the grid are valid where |x - anchor| <= reach (returned).
struct ShootingResult {
    std::vector<double> u;
    double slope_at_anchor = 0.0;
    double reach = 0.0;
};

inline ShootingResult shoot_scalar_profile(const ReactionSystem& sys, const Grid1D& g, double anchor = 0.0) {
    require(sys.n == 1, ErrorKind::invalid_argument, "shooting is implemented for scalar systems");
    const double um = sys.u_minus[0], upl = sys.u_plus[0];
    if (std::abs(um - upl) < 1e-12) fail(ErrorKind::no_connection, "end states coincide");
    const double mid = 0.5 * (um + upl);
    const double sgn = upl > mid ? 1.0 : -1.0;
    const double dx = g.h() / 4.0;
    auto rhs = [&](double u, double p, double& du, double& dp) {
        double fu;
        std::span<const double> us(&u, 1);
        std::span<double> fs(&fu, 1);
        sys.f(us, fs);
        du = p;
        dp = -fu;
    };
    auto rk4 = [&](double& u, double& p, double hstep) {
        double k1u, k1p, k2u, k2p, k3u, k3p, k4u, k4p;
        rhs(u, p, k1u, k1p);
        rhs(u + 0.5 * hstep * k1u, p + 0.5 * hstep * k1p, k2u, k2p);
        rhs(u + 0.5 * hstep * k2u, p + 0.5 * hstep * k2p, k3u, k3p);
        rhs(u + hstep * k3u, p + hstep * k3p, k4u, k4p);
        u += hstep / 6 * (k1u + 2 * k2u + 2 * k3u + k4u);
        p += hstep / 6 * (k1p + 2 * k2p + 2 * k3p + k4p);
    };
    // classify: +1 overshoot (slope too steep), -1 turn back (too shallow), 0 undecided
    auto classify = [&](double a) {
        double u = mid, p = sgn * a;
        double L = g.x_max - anchor;
        for (double x = 0; x < L; x += dx) {
            rk4(u, p, dx);
            if ((u - upl) * sgn > 0) return 1;
            if (p * sgn < 0) return -1;
        }
        return 0;
    };
    double lo = 0.0, hi = 10.0 * std::abs(upl - um) + 1.0;
    for (int k = 0; k < 200 && hi - lo > 1e-17 * hi; ++k) {
        double m = 0.5 * (lo + hi);
        int c = classify(m);
        if (c > 0) hi = m;
        else if (c < 0) lo = m;
        else { lo = hi = m; break; }
        if (m == lo && m == hi) break;
    }
    double a = 0.5 * (lo + hi);
    ShootingResult out;
    out.slope_at_anchor = sgn * a;
    out.u.assign(g.N, std::numeric_limits<double>::quiet_NaN());
    // integrate both directions from the anchor, sampling at grid nodes
    double reach = std::numeric_limits<double>::infinity();
    for (int dir : {+1, -1}) {
        double u = mid, p = sgn * a, x = anchor;
        double target_end = dir > 0 ? upl : um;
        for (std::size_t step = 0;; ++step) {
            double xn = x + dir * dx;
            if (xn > g.x_max + 1e-12 || xn < g.x_min - 1e-12) break;
            rk4(u, p, dir * dx);
            x = xn;
            double sidx = (x - g.x_min) / g.h();
            double ri = std::round(sidx);
            if (std::abs(sidx - ri) < 1e-6) out.u[static_cast<std::size_t>(ri)] = u;
            if ((u - target_end) * (dir > 0 ? sgn : -sgn) > 0 || p * sgn < 0) {
                reach = std::min(reach, std::abs(x - anchor));
                break;
            }
        }
    }
    std::size_t ia = g.nearest(anchor);
    if (std::abs(g.x(ia) - anchor) < 1e-9) out.u[ia] = mid;
    out.reach = std::isfinite(reach) ? reach : std::min(g.x_max - anchor, anchor - g.x_min);
    return out;
}

}  // namespace frontstab
