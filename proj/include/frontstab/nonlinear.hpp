#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/tools/minima.hpp>
#include <unsupported/Eigen/FFT>

#include "frontstab/error.hpp"
#include "frontstab/model.hpp"
#include "frontstab/numerics.hpp"
#include "frontstab/profile.hpp"
#include "frontstab/spectral.hpp"

namespace frontstab {

// ---------------------------------------------------------------------------
// Full PDE

struct PdeOptions {
    double T_end = 40.0;
    double dt = 0.01;
    double snapshot_dt = 0.1;   ///< must be a multiple of dt
    double hull_margin = 0.5;   ///< admissible initial range, relative to the end-state hull width
    double blowup_factor = 10.0;
};

/// Snapshots of u~(x, t_k) on the profile grid, node-major, uniformly spaced in t.
struct Trajectory {
    Grid1D grid;
    int n = 1;
    double dt = 0.0;
    double snapshot_dt = 0.0;
    std::vector<double> t;
    std::vector<std::vector<double>> u;

    [[nodiscard]] std::size_t size() const { return t.size(); }
    [[nodiscard]] std::vector<double> component(std::size_t k, int c) const {
        std::vector<double> out(grid.N);
        for (std::size_t i = 0; i < grid.N; ++i) out[i] = u[k][i * n + c];
        return out;
    }
};

namespace detail {

struct Hull {
    std::vector<double> lo, hi;
    double bound = 0.0;  ///< blow-up threshold on |u|
};

inline Hull end_state_hull(const FrontProfile& p, double margin, double blowup) {
    Hull h;
    double big = 1.0;
    for (int c = 0; c < p.n; ++c) {
        double a = std::min(p.u_minus[c], p.u_plus[c]), b = std::max(p.u_minus[c], p.u_plus[c]);
        double m = margin * std::max(b - a, 1.0);
        h.lo.push_back(a - m);
        h.hi.push_back(b + m);
        big = std::max({big, std::abs(a), std::abs(b)});
    }
    h.bound = blowup * big;
    return h;
}

/// c I - dt A for a banded A.
inline BandMatrix<double> shifted_band(const BandMatrix<double>& A, double c, double dt) {
    const std::size_t n = A.size();
    BandMatrix<double> M(n, A.kl(), A.ku());
    for (std::size_t r = 0; r < n; ++r) {
        std::size_t j0 = r >= A.kl() ? r - A.kl() : 0, j1 = std::min(n - 1, r + A.ku());
        for (std::size_t j = j0; j <= j1; ++j) M(r, j) = -dt * A(r, j) + (r == j ? c : 0.0);
    }
    return M;
}

}  // namespace detail

/// IMEX stepping of u_t = u_xx + f(u): implicit diffusion (banded solve), explicit reaction,
/// SBDF2 after one backward/forward Euler step. Dirichlet data u-, u+ enter as ghost values.
inline Trajectory evolve_pde(const ReactionSystem& sys, const FrontProfile& p, const std::vector<double>& initial,
                             const PdeOptions& opt = {}) {
    const int n = p.n;
    const Grid1D& g = p.grid;
    const std::size_t N = g.N, dim = N * n;
    require(initial.size() == dim, ErrorKind::invalid_argument, "initial state has the wrong size");
    require(opt.dt > 0 && opt.T_end >= 0 && opt.snapshot_dt >= opt.dt, ErrorKind::invalid_argument,
            "time steps must be positive with snapshot_dt >= dt");
    const auto every = static_cast<std::size_t>(std::llround(opt.snapshot_dt / opt.dt));
    require(std::abs(every * opt.dt - opt.snapshot_dt) < 1e-9 * opt.snapshot_dt, ErrorKind::invalid_argument,
            "snapshot_dt must be a multiple of dt");
    const auto steps = static_cast<std::size_t>(std::llround(opt.T_end / opt.snapshot_dt)) * every;

    auto hull = detail::end_state_hull(p, opt.hull_margin, opt.blowup_factor);
    std::vector<double> jac(n * n);
    double lip = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        for (int c = 0; c < n; ++c)
            require(initial[i * n + c] >= hull.lo[c] && initial[i * n + c] <= hull.hi[c],
                    ErrorKind::invalid_argument, "initial state leaves the end-state hull");
        eval_jacobian_into(sys, std::span<const double>(initial).subspan(i * n, n), jac);
        for (int a = 0; a < n; ++a) {
            double row = 0;
            for (int b = 0; b < n; ++b) row += std::abs(jac[a + b * n]);
            lip = std::max(lip, row);
        }
    }
    require(opt.dt * lip <= 1.0, ErrorKind::invalid_argument, "dt outside the explicit-reaction stability range");

    const double ih2 = 1.0 / (g.h() * g.h());
    const auto st = laplacian_stencil(p.stencil_order);
    auto A = second_difference_operator(g, n, p.stencil_order);
    std::vector<double> ghost(dim, 0.0);
    for (std::size_t i : {std::size_t{0}, std::size_t{1}, N - 2, N - 1})
        for (int k = -2; k <= 2; ++k) {
            long j = static_cast<long>(i) + k;
            if (j >= 0 && j < static_cast<long>(N)) continue;
            for (int c = 0; c < n; ++c) ghost[i * n + c] += st[k + 2] * ih2 * (j < 0 ? p.u_minus[c] : p.u_plus[c]);
        }
    BandedLU<double> euler(detail::shifted_band(A, 1.0, opt.dt));
    BandedLU<double> bdf(detail::shifted_band(A, 1.5, opt.dt));

    auto reaction = [&](const std::vector<double>& u) {
        std::vector<double> out(dim);
        for (std::size_t i = 0; i < N; ++i)
            sys.f(std::span<const double>(u).subspan(i * n, n), std::span<double>(out).subspan(i * n, n));
        return out;
    };

    Trajectory tr;
    tr.grid = g;
    tr.n = n;
    tr.dt = opt.dt;
    tr.snapshot_dt = opt.snapshot_dt;
    tr.t.push_back(0.0);
    tr.u.push_back(initial);

    std::vector<double> prev, cur = initial, fprev, fcur = reaction(cur), rhs(dim);
    for (std::size_t s = 1; s <= steps; ++s) {
        std::vector<double> next;
        if (s == 1) {
            for (std::size_t r = 0; r < dim; ++r) rhs[r] = cur[r] + opt.dt * (fcur[r] + ghost[r]);
            next = euler.solve(rhs);
        } else {
            for (std::size_t r = 0; r < dim; ++r)
                rhs[r] = 2 * cur[r] - 0.5 * prev[r] + opt.dt * (2 * fcur[r] - fprev[r] + ghost[r]);
            next = bdf.solve(rhs);
        }
        for (double v : next)
            if (!std::isfinite(v) || std::abs(v) > hull.bound)
                fail(ErrorKind::instability, "solution left the blow-up guard at t = " + std::to_string(s * opt.dt));
        prev = std::move(cur);
        cur = std::move(next);
        fprev = std::move(fcur);
        fcur = reaction(cur);
        if (s % every == 0) {
            tr.t.push_back(static_cast<double>(s / every) * opt.snapshot_dt);
            tr.u.push_back(cur);
        }
    }
    return tr;
}

// ---------------------------------------------------------------------------
// Shifted snapshots

/// Cubic Hermite interpolant of one snapshot, per component.
class SnapshotInterpolant {
public:
    SnapshotInterpolant(const Grid1D& g, int n, std::span<const double> u) : g_(g), n_(n) {
        for (int c = 0; c < n; ++c) {
            std::vector<double> f(g.N);
            for (std::size_t i = 0; i < g.N; ++i) f[i] = u[i * n + c];
            d_.push_back(derivative4(f, g.h()));
            f_.push_back(std::move(f));
        }
    }
    [[nodiscard]] double value(int c, double x, double* dx = nullptr) const { return hermite_eval(g_, f_[c], d_[c], x, dx); }
    [[nodiscard]] int n() const { return n_; }

private:
    Grid1D g_;
    int n_;
    std::vector<std::vector<double>> f_, d_;
};

/// u(x) = u~(x + a) - u_bar(x) on the profile grid.
inline std::vector<double> shifted_perturbation(const SnapshotInterpolant& s, const FrontProfile& p, double a) {
    std::vector<double> u(p.grid.N * p.n);
    for (std::size_t i = 0; i < p.grid.N; ++i)
        for (int c = 0; c < p.n; ++c) u[i * p.n + c] = s.value(c, p.grid.x(i) + a) - p.u(i, c);
    return u;
}

inline double node_major_norm(const std::vector<double>& u, const Grid1D& g, int n, double p) {
    std::vector<double> mag(g.N);
    for (std::size_t i = 0; i < g.N; ++i) {
        double m = 0;
        for (int c = 0; c < n; ++c) m = std::max(m, std::abs(u[i * n + c]));
        mag[i] = m;
    }
    return discrete_lp_norm(mag, g.h(), p);
}

// ---------------------------------------------------------------------------
// Scalar phase

/// alpha(t), alpha_dot(t) from the causal integral representation with e(y,t) = chi(t) psi_tilde(y).
struct PhaseSeries {
    std::vector<double> t, alpha, alpha_dot;
    std::vector<double> alpha_dot_fd;  ///< fourth-order differences of alpha
    std::vector<double> u_l1, u_l2, u_inf;  ///< norms of u~(x + alpha) - u_bar
    std::vector<int> iterations;
    int max_iterations = 0;
    double projection0 = 0.0;  ///< <psi_tilde, u0>
    double alpha_dot_check = 0.0;  ///< max deviation of alpha_dot_fd from alpha_dot off t in [1, 2], relative to the local envelope
};

struct PhaseOptions {
    double tol = 1e-10;
    int max_iterations = 5;
    double max_relative_size = 0.25;  ///< |u| bound relative to the end-state hull width
};

namespace detail {

inline double hull_width(const FrontProfile& p) {
    double w = 0;
    for (int c = 0; c < p.n; ++c) w = std::max(w, std::abs(p.u_plus[c] - p.u_minus[c]));
    return std::max(w, 1.0);
}

inline std::vector<double> node_major_derivative(const std::vector<double>& f, const Grid1D& g, int n) {
    std::vector<double> out(f.size()), col(g.N);
    for (int c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < g.N; ++i) col[i] = f[i * n + c];
        auto d = derivative4(col, g.h());
        for (std::size_t i = 0; i < g.N; ++i) out[i * n + c] = d[i];
    }
    return out;
}

/// N(u) = f(u + u_bar) - f(u_bar) - Df(u_bar) u, node-major.
inline std::vector<double> quadratic_remainder(const ReactionSystem& sys, std::span<const double> u_bar,
                                               std::span<const double> u, std::size_t N, int n) {
    std::vector<double> out(N * n), a(n), fa(n), fb(n), jac(n * n);
    for (std::size_t i = 0; i < N; ++i) {
        auto ub = u_bar.subspan(i * n, n);
        for (int c = 0; c < n; ++c) a[c] = ub[c] + u[i * n + c];
        sys.f(a, fa);
        sys.f(ub, fb);
        eval_jacobian_into(sys, ub, jac);
        for (int r = 0; r < n; ++r) {
            double lin = 0;
            for (int c = 0; c < n; ++c) lin += jac[r + c * n] * u[i * n + c];
            out[i * n + r] = fa[r] - fb[r] - lin;
        }
    }
    return out;
}

/// Trapezoid weights with the third-order Gregory correction at the lower end (the integrands used
/// here vanish smoothly at the upper end).
inline double gregory_weight(std::size_t j, double h) {
    static constexpr double w[3] = {3.0 / 8, 7.0 / 6, 23.0 / 24};
    return h * (j < 3 ? w[j] : 1.0);
}


}  // namespace detail

/// Causal marching of
///   alpha(t) = -chi(t)<psi, u0> + int_0^t chi(t - s) g(s) ds,  g = -<psi, N(u)> + alpha_dot <psi', u>,
/// with u(x,s) = u~(x + alpha(s), s) - u_bar(x) re-extracted by Hermite shifting; alpha_dot uses chi'.
/// The time integral uses Gregory-corrected trapezoid weights on the snapshot lattice.
inline PhaseSeries extract_phase_integral(const ReactionSystem& sys, const Trajectory& tr, const FrontProfile& p,
                                          const SpectralData& sd, const PhaseOptions& opt = {}) {
    const Grid1D& g = p.grid;
    const int n = p.n;
    const std::size_t N = g.N, K = tr.size();
    require(K >= 1 && tr.n == n && tr.grid.N == N, ErrorKind::invalid_argument, "trajectory does not match profile");
    const double ds = tr.snapshot_dt;
    const auto& psi = sd.psi_tilde;
    const auto psi_x = detail::node_major_derivative(psi, g, n);
    auto ip = [&](const std::vector<double>& a, const std::vector<double>& b) { return detail::inner(a, b, g, n); };
    const double bound = opt.max_relative_size * detail::hull_width(p);

    PhaseSeries out;
    out.t = tr.t;
    std::vector<double> u0(N * n);
    for (std::size_t r = 0; r < N * n; ++r) u0[r] = tr.u[0][r] - p.u_bar[r];
    out.projection0 = ip(psi, u0);
    std::vector<double> gs(K, 0.0);

    auto history = [&](std::size_t k, double gk, bool dot) {
        double s = -(dot ? cutoff_chi_prime(tr.t[k]) : cutoff_chi(tr.t[k])) * out.projection0;
        for (std::size_t j = 0; j <= k; ++j) {
            double w = detail::gregory_weight(j, ds);
            double tau = tr.t[k] - tr.t[j];
            double kern = dot ? cutoff_chi_prime(tau) : cutoff_chi(tau);
            if (kern != 0.0) s += w * kern * (j == k ? gk : gs[j]);
        }
        return s;
    };

    for (std::size_t k = 0; k < K; ++k) {
        SnapshotInterpolant snap(g, n, tr.u[k]);
        double a = k > 0 ? out.alpha.back() : 0.0;
        double gk = 0.0, ad = 0.0;
        std::vector<double> u;
        int it = 0;
        for (;;) {
            ++it;
            u = shifted_perturbation(snap, p, a);
            ad = history(k, gk, true);
            auto Nu = detail::quadratic_remainder(sys, p.u_bar, u, N, n);
            gk = -ip(psi, Nu) + ad * ip(psi_x, u);
            double a_new = history(k, gk, false);
            double change = std::abs(a_new - a);
            a = a_new;
            if (change < opt.tol) break;
            if (it >= opt.max_iterations)
                fail(ErrorKind::quadrature_unconverged,
                     "phase fixed point did not converge at t = " + std::to_string(tr.t[k]) + "; reduce the snapshot step");
        }
        u = shifted_perturbation(snap, p, a);
        ad = history(k, gk, true);
        double sup = node_major_norm(u, g, n, INFINITY);
        require(sup <= bound, ErrorKind::assumption_violated,
                "perturbation too large for phase extraction at t = " + std::to_string(tr.t[k]));
        gs[k] = gk;
        out.alpha.push_back(a);
        out.alpha_dot.push_back(ad);
        out.iterations.push_back(it);
        out.max_iterations = std::max(out.max_iterations, it);
        out.u_l1.push_back(node_major_norm(u, g, n, 1.0));
        out.u_l2.push_back(node_major_norm(u, g, n, 2.0));
        out.u_inf.push_back(sup);
    }
    out.alpha_dot_fd = derivative4(out.alpha, ds);
    // relative to the local envelope max |alpha_dot| on [t - 1, t + 1], so sign changes do not divide by ~0
    double scale = 0;
    for (double v : out.alpha_dot) scale = std::max(scale, std::abs(v));
    const auto reach = static_cast<std::size_t>(std::llround(1.0 / ds));
    for (std::size_t k = 2; k + 2 < K; ++k) {
        if (out.t[k] >= 1.0 - 2 * ds && out.t[k] <= 2.0 + 2 * ds) continue;
        double env = 0;
        for (std::size_t j = k > reach ? k - reach : 0; j <= std::min(K - 1, k + reach); ++j)
            env = std::max(env, std::abs(out.alpha_dot[j]));
        if (env < 1e-8 * scale) continue;
        out.alpha_dot_check = std::max(out.alpha_dot_check, std::abs(out.alpha_dot_fd[k] - out.alpha_dot[k]) / env);
    }
    return out;
}

/// Limit of alpha: last value plus the exponential-tail extrapolation of alpha_dot.
inline double alpha_limit(const PhaseSeries& ph) {
    const std::size_t K = ph.t.size();
    if (K == 0) return 0.0;
    std::vector<double> tt, aa;
    for (std::size_t k = 0; k < K; ++k)
        if (ph.t[k] >= 0.5 * ph.t.back() && std::abs(ph.alpha_dot[k]) > 1e-300) {
            tt.push_back(ph.t[k]);
            aa.push_back(ph.alpha_dot[k]);
        }
    double extra = 0.0;
    if (tt.size() >= 3) {
        double r = decay_rate(tt, aa);
        if (r > 0 && std::isfinite(r)) extra = ph.alpha_dot.back() / r;
    }
    return ph.alpha.back() + extra;
}

// ---------------------------------------------------------------------------
// Fitted phase

struct PhaseFit {
    std::vector<double> t, alpha;
    std::vector<bool> multi_minimum;
    bool warning = false;
};

namespace detail {

inline double shift_objective(const SnapshotInterpolant& s, const FrontProfile& p, double a) {
    double J = 0;
    for (std::size_t i = 0; i < p.grid.N; ++i) {
        double w = trapezoid_weight(i, p.grid.N, p.grid.h());
        for (int c = 0; c < p.n; ++c) {
            double r = s.value(c, p.grid.x(i) + a) - p.u(i, c);
            J += w * r * r;
        }
    }
    return J;
}

}  // namespace detail

/// argmin_a ||u~(. + a) - u_bar||_{L2}: lattice scan around the guess, Brent, then Gauss-Newton on J'(a) = 0.
/// multi is set when the scan sees more than one local minimum.
inline double fit_shift(const SnapshotInterpolant& s, const FrontProfile& p, double guess, double half_width,
                        double step, bool* multi = nullptr) {
    auto J = [&](double a) { return detail::shift_objective(s, p, a); };
    double centre = guess;
    std::vector<double> as, js;
    std::size_t best = 0;
    for (int pass = 0; pass < 20; ++pass) {
        as.clear();
        js.clear();
        const int m = static_cast<int>(std::ceil(half_width / step));
        for (int k = -m; k <= m; ++k) {
            as.push_back(centre + k * step);
            js.push_back(J(as.back()));
        }
        best = static_cast<std::size_t>(std::min_element(js.begin(), js.end()) - js.begin());
        if (best != 0 && best + 1 != as.size()) break;
        centre = as[best];
    }
    if (multi) {
        int minima = 0;
        for (std::size_t k = 1; k + 1 < js.size(); ++k)
            if (js[k] < js[k - 1] && js[k] <= js[k + 1]) ++minima;
        *multi = minima > 1;
    }
    double lo = as[best > 0 ? best - 1 : 0], hi = as[std::min(best + 1, as.size() - 1)];
    double a = boost::math::tools::brent_find_minima(J, lo, hi, 50).first;
    for (int it = 0; it < 8; ++it) {
        double num = 0, den = 0;
        for (std::size_t i = 0; i < p.grid.N; ++i) {
            double w = trapezoid_weight(i, p.grid.N, p.grid.h());
            for (int c = 0; c < p.n; ++c) {
                double d = 0;
                double r = s.value(c, p.grid.x(i) + a, &d) - p.u(i, c);
                num += w * r * d;
                den += w * d * d;
            }
        }
        if (!(den > 0)) break;
        double da = -num / den;
        a += da;
        if (std::abs(da) < 1e-13) break;
    }
    return a;
}

inline PhaseFit extract_phase_fit(const Trajectory& tr, const FrontProfile& p) {
    PhaseFit out;
    out.t = tr.t;
    double guess = 0.0;
    for (std::size_t k = 0; k < tr.size(); ++k) {
        SnapshotInterpolant s(p.grid, p.n, tr.u[k]);
        bool multi = false;
        double a = k == 0 ? fit_shift(s, p, 0.0, 4.0, 0.05, &multi) : fit_shift(s, p, guess, 0.5, 0.05, &multi);
        out.alpha.push_back(a);
        out.multi_minimum.push_back(multi);
        out.warning = out.warning || multi;
        guess = a;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Field phase kernels
//
// e~(x,t;y) = chi(t) psi_tilde(y) D(x - y, t), D = w+ - w-, E = w+ + w-, w± = errfn((z ± t)/sqrt(4t)).
// Each w± solves w_t = w_zz ± w_z, so D_t = D_zz + E_z and E_t = E_zz + D_z.

/// z-derivatives of chi D and its first two t-derivatives at one point.
struct PhaseKernel {
    std::array<double, 5> K0{};  ///< d^m/dz^m chi D, m = 0..4
    std::array<double, 3> K1{};  ///< d^m/dz^m d/dt (chi D), m = 0..2
    double K2 = 0.0;             ///< d^2/dt^2 (chi D)
};

inline PhaseKernel phase_kernel(double z, double tau) {
    PhaseKernel k;
    const double chi = cutoff_chi(tau), chi1 = cutoff_chi_prime(tau), chi2 = cutoff_chi_second(tau);
    if (chi == 0.0 && chi1 == 0.0 && chi2 == 0.0) return k;
    const double s = std::sqrt(4 * tau);
    std::array<double, 5> D{}, E{};
    for (int sign : {+1, -1}) {
        double a = (z + sign * tau) / s;
        double gauss = std::exp(-a * a) / std::sqrt(std::numbers::pi);
        std::array<double, 4> H{1.0, 2 * a, 4 * a * a - 2, 8 * a * a * a - 12 * a};
        std::array<double, 5> w{};
        w[0] = errfn(a);
        for (int m = 1; m <= 4; ++m) w[m] = ((m - 1) % 2 == 0 ? 1.0 : -1.0) * H[m - 1] * gauss / std::pow(s, m);
        for (int m = 0; m <= 4; ++m) {
            D[m] += sign * w[m];
            E[m] += w[m];
        }
    }
    for (int m = 0; m <= 4; ++m) k.K0[m] = chi * D[m];
    for (int m = 0; m <= 2; ++m) k.K1[m] = chi1 * D[m] + chi * (D[m + 2] + E[m + 1]);
    k.K2 = chi2 * D[0] + 2 * chi1 * (D[2] + E[1]) + chi * (D[4] + 2 * E[3] + D[2]);
    return k;
}

/// Spectra of the nine kernel samples on a coarse lattice, cached per t = m dt.
class PhaseKernelBank {
public:
    using Spectrum = std::vector<std::complex<double>>;

    PhaseKernelBank(const Grid1D& coarse, double dt) : g_(coarse), dt_(dt) {
        L_ = 1;
        while (L_ < 2 * g_.N - 1) L_ *= 2;
        fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum);
    }

    [[nodiscard]] std::size_t fft_size() const { return L_; }
    [[nodiscard]] std::size_t bins() const { return L_ / 2 + 1; }

    /// Spectra in the order K0..K0'''', K1..K1'', K2; empty when the kernel vanishes.
    const std::array<Spectrum, 9>& at(std::size_t m) {
        if (m >= cache_.size()) cache_.resize(m + 1);
        if (!cache_[m]) {
            const double tau = static_cast<double>(m) * dt_;
            std::array<Spectrum, 9> s;
            if (cutoff_chi(tau) != 0.0 || cutoff_chi_prime(tau) != 0.0) {
                std::array<std::vector<double>, 9> raw;
                for (auto& r : raw) r.assign(L_, 0.0);
                const long M = static_cast<long>(g_.N) - 1;
                for (long o = -M; o <= M; ++o) {
                    auto k = phase_kernel(static_cast<double>(o) * g_.h(), tau);
                    std::size_t idx = static_cast<std::size_t>((o + static_cast<long>(L_)) % static_cast<long>(L_));
                    for (int q = 0; q < 5; ++q) raw[q][idx] = k.K0[q];
                    for (int q = 0; q < 3; ++q) raw[5 + q][idx] = k.K1[q];
                    raw[8][idx] = k.K2;
                }
                for (int q = 0; q < 9; ++q) fft_.fwd(s[q], raw[q]);
            }
            cache_[m] = std::move(s);
        }
        return *cache_[m];
    }

    Spectrum forward(const std::vector<double>& f) {
        std::vector<double> pad(L_, 0.0);
        std::copy(f.begin(), f.end(), pad.begin());
        Spectrum out;
        fft_.fwd(out, pad);
        return out;
    }

    std::vector<double> inverse(const Spectrum& s) {
        std::vector<double> out;
        fft_.inv(out, s, static_cast<Eigen::Index>(L_));
        out.resize(g_.N);
        return out;
    }

private:
    Grid1D g_;
    double dt_;
    std::size_t L_ = 0;
    Eigen::FFT<double> fft_;
    std::vector<std::optional<std::array<Spectrum, 9>>> cache_;
};

// ---------------------------------------------------------------------------
// Residual terms

/// Sampled fields for the v equation, node-major for v-type fields.
struct ResidualInputs {
    const ReactionSystem* sys = nullptr;
    Grid1D grid;
    int n = 1;
    std::span<const double> u_bar, u_bar_x, v, v_x;
    std::span<const double> alpha_t, alpha_x, alpha_xx;
};

struct ResidualTerms {
    Grid1D grid;
    int n = 1;
    std::vector<double> Q, R, S, T;
    std::vector<double> T_alt;   ///< (Q + Df(u_bar) v) alpha_x, second evaluation path
    std::vector<double> N_term;  ///< f(v + u_bar) - f(u_bar) - Df(u_bar) v as used by the scalar-phase scheme
    std::vector<double> R_y, S_yy;
};

/// Q = f(v+u_bar) - f(u_bar) - Df(u_bar)v, R = v a_t + v a_xx + (u_bar_x + v_x) a_x^2/(1 + a_x),
/// S = -v a_x, T = (f(v+u_bar) - f(u_bar)) a_x.
inline ResidualTerms compute_residual_terms(const ResidualInputs& in) {
    const int n = in.n;
    const std::size_t N = in.grid.N;
    require(in.sys != nullptr && in.u_bar.size() == N * n && in.v.size() == N * n && in.v_x.size() == N * n &&
                in.u_bar_x.size() == N * n && in.alpha_t.size() == N && in.alpha_x.size() == N &&
                in.alpha_xx.size() == N,
            ErrorKind::invalid_argument, "residual inputs have inconsistent sizes");
    ResidualTerms r;
    r.grid = in.grid;
    r.n = n;
    r.Q.resize(N * n);
    r.R.resize(N * n);
    r.S.resize(N * n);
    r.T.resize(N * n);
    r.T_alt.resize(N * n);
    std::vector<double> a(n), fa(n), fb(n), jac(n * n);
    for (std::size_t i = 0; i < N; ++i) {
        const double ax = in.alpha_x[i];
        require(std::abs(1.0 + ax) >= 0.5, ErrorKind::division_degenerate,
                "|1 + alpha_x| < 1/2 at x = " + std::to_string(in.grid.x(i)));
        auto ub = in.u_bar.subspan(i * n, n);
        for (int c = 0; c < n; ++c) a[c] = ub[c] + in.v[i * n + c];
        in.sys->f(a, fa);
        in.sys->f(ub, fb);
        eval_jacobian_into(*in.sys, ub, jac);
        for (int c = 0; c < n; ++c) {
            const std::size_t q = i * n + c;
            double lin = 0;
            for (int b = 0; b < n; ++b) lin += jac[c + b * n] * in.v[i * n + b];
            const double v = in.v[q];
            r.Q[q] = fa[c] - fb[c] - lin;
            r.R[q] = v * in.alpha_t[i] + v * in.alpha_xx[i] + (in.u_bar_x[q] + in.v_x[q]) * ax * ax / (1.0 + ax);
            r.S[q] = -v * ax;
            r.T[q] = (fa[c] - fb[c]) * ax;
            r.T_alt[q] = (r.Q[q] + lin) * ax;
        }
    }
    r.N_term = r.Q;
    r.R_y = detail::node_major_derivative(r.R, in.grid, n);
    r.S_yy = detail::node_major_derivative(detail::node_major_derivative(r.S, in.grid, n), in.grid, n);
    return r;
}

// ---------------------------------------------------------------------------
// Field phase

struct FieldOptions {
    std::size_t stride = 5;  ///< coarse grid = every stride-th profile node
    double max_relative_size = 0.25;
};

/// alpha~(x,t_k) with derivative fields and the re-centred perturbation v on a coarse grid.
struct PhaseField {
    Grid1D grid;
    std::size_t stride = 1;
    int n = 1;
    std::vector<double> t;
    std::vector<std::vector<double>> alpha, alpha_x, alpha_xx, alpha_t;
    std::vector<std::vector<double>> v, v_x;  ///< node-major
    std::vector<ResidualTerms> residuals;
    int iterations = 1;  ///< fixed-point sweeps per step
    double max_abs_alpha_x = 0.0;
};

/// Causal marching of
///   alpha~(x,t) = -int e~(x,t;y) v0 dy - int_0^t int e~(x,t-s;y) (Q + R_y + (d_y^2 + d_s) S + T) dy ds,
/// with R_y and the S derivatives moved onto e~ by parts, so that
///   alpha~ = -K0 * (psi v0) - int [K0 * U0 + K0' * U1 + (K0'' + K1) * U2] ds,
///   U0 = psi (Q + T) - psi' R + psi'' S,  U1 = psi R - 2 psi' S,  U2 = psi S.
/// x-derivatives shift the kernel z-derivative order; the t-derivative replaces K0 by K1 and K1 by K2.
/// Since e~ vanishes for t <= 1 the fields at t_k depend only on sources at s <= t_k - 1.
inline PhaseField extract_phase_field(const ReactionSystem& sys, const Trajectory& tr, const FrontProfile& p,
                                      const SpectralData& sd, const FieldOptions& opt = {}) {
    const Grid1D& fine = p.grid;
    const int n = p.n;
    require(opt.stride >= 1 && (fine.N - 1) % opt.stride == 0, ErrorKind::invalid_argument,
            "coarse stride must divide the grid");
    require(tr.n == n && tr.grid.N == fine.N && tr.size() >= 1, ErrorKind::invalid_argument,
            "trajectory does not match profile");
    const std::size_t Nc = (fine.N - 1) / opt.stride + 1, K = tr.size();
    const Grid1D g(fine.x_min, fine.x_max, Nc);
    const double H = g.h(), ds = tr.snapshot_dt;
    const double bound = opt.max_relative_size * detail::hull_width(p);

    auto psi_x = detail::node_major_derivative(sd.psi_tilde, fine, n);
    auto psi_xx = detail::node_major_derivative(psi_x, fine, n);
    std::vector<double> psi(Nc * n), psi1(Nc * n), psi2(Nc * n), ub(Nc * n), ubx(Nc * n);
    for (std::size_t i = 0; i < Nc; ++i)
        for (int c = 0; c < n; ++c) {
            std::size_t f = i * opt.stride * n + c, q = i * n + c;
            psi[q] = sd.psi_tilde[f];
            psi1[q] = psi_x[f];
            psi2[q] = psi_xx[f];
            ub[q] = p.u_bar[f];
            ubx[q] = p.u_bar_prime[f];
        }

    PhaseKernelBank bank(g, ds);
    const std::size_t B = bank.bins();
    using Spectrum = PhaseKernelBank::Spectrum;
    auto weighted = [&](const std::vector<double>& f) {
        std::vector<double> w(Nc);
        for (std::size_t i = 0; i < Nc; ++i) w[i] = trapezoid_weight(i, Nc, H) * f[i];
        return bank.forward(w);
    };

    PhaseField out;
    out.grid = g;
    out.stride = opt.stride;
    out.n = n;
    out.t = tr.t;

    std::vector<double> v0(Nc);
    for (std::size_t i = 0; i < Nc; ++i) {
        double s = 0;
        for (int c = 0; c < n; ++c) s += psi[i * n + c] * (tr.u[0][i * opt.stride * n + c] - ub[i * n + c]);
        v0[i] = s;
    }
    const Spectrum V0 = weighted(v0);
    std::vector<std::array<Spectrum, 3>> sources;

    for (std::size_t k = 0; k < K; ++k) {
        std::array<Spectrum, 4> acc;
        for (auto& a : acc) a.assign(B, {0.0, 0.0});
        auto add = [&](const std::array<Spectrum, 9>& ks, const Spectrum& u0, const Spectrum* u1, const Spectrum* u2,
                       double w) {
            for (std::size_t b = 0; b < B; ++b) {
                const auto x0 = u0[b];
                const auto x1 = u1 ? (*u1)[b] : std::complex<double>{};
                const auto x2 = u2 ? (*u2)[b] : std::complex<double>{};
                acc[0][b] += w * (ks[0][b] * x0 + ks[1][b] * x1 + (ks[2][b] + ks[5][b]) * x2);
                acc[1][b] += w * (ks[1][b] * x0 + ks[2][b] * x1 + (ks[3][b] + ks[6][b]) * x2);
                acc[2][b] += w * (ks[2][b] * x0 + ks[3][b] * x1 + (ks[4][b] + ks[7][b]) * x2);
                acc[3][b] += w * (ks[5][b] * x0 + ks[6][b] * x1 + (ks[7][b] + ks[8][b]) * x2);
            }
        };
        bool any = false;
        if (const auto& ks = bank.at(k); !ks[0].empty()) {
            add(ks, V0, nullptr, nullptr, 1.0);
            any = true;
        }
        for (std::size_t j = 0; j < k; ++j) {
            const auto& ks = bank.at(k - j);
            if (ks[0].empty()) continue;
            add(ks, sources[j][0], &sources[j][1], &sources[j][2], detail::gregory_weight(j, ds));
            any = true;
        }
        std::array<std::vector<double>, 4> fields;
        for (int q = 0; q < 4; ++q) {
            if (any) {
                fields[q] = bank.inverse(acc[q]);
                for (double& x : fields[q]) x = -x;
            } else {
                fields[q].assign(Nc, 0.0);
            }
        }
        const auto& ax = fields[1];
        for (std::size_t i = 0; i < Nc; ++i) {
            out.max_abs_alpha_x = std::max(out.max_abs_alpha_x, std::abs(ax[i]));
            require(std::abs(ax[i]) < 0.5, ErrorKind::shift_non_invertible,
                    "|alpha_x| >= 1/2 at t = " + std::to_string(tr.t[k]));
        }

        SnapshotInterpolant snap(fine, n, tr.u[k]);
        std::vector<double> v(Nc * n), vx(Nc * n);
        double vsup = 0;
        for (std::size_t i = 0; i < Nc; ++i)
            for (int c = 0; c < n; ++c) {
                double d = 0;
                double val = snap.value(c, g.x(i) + fields[0][i], &d);
                v[i * n + c] = val - ub[i * n + c];
                vx[i * n + c] = d * (1.0 + ax[i]) - ubx[i * n + c];
                vsup = std::max(vsup, std::abs(v[i * n + c]));
            }
        require(vsup <= bound, ErrorKind::assumption_violated,
                "perturbation too large for the field phase at t = " + std::to_string(tr.t[k]));

        ResidualInputs in{&sys, g, n, ub, ubx, v, vx, fields[3], fields[1], fields[2]};
        auto res = compute_residual_terms(in);
        std::vector<double> U0(Nc), U1(Nc), U2(Nc);
        for (std::size_t i = 0; i < Nc; ++i)
            for (int c = 0; c < n; ++c) {
                std::size_t q = i * n + c;
                U0[i] += psi[q] * (res.Q[q] + res.T[q]) - psi1[q] * res.R[q] + psi2[q] * res.S[q];
                U1[i] += psi[q] * res.R[q] - 2 * psi1[q] * res.S[q];
                U2[i] += psi[q] * res.S[q];
            }
        sources.push_back({weighted(U0), weighted(U1), weighted(U2)});

        out.alpha.push_back(std::move(fields[0]));
        out.alpha_x.push_back(std::move(fields[1]));
        out.alpha_xx.push_back(std::move(fields[2]));
        out.alpha_t.push_back(std::move(fields[3]));
        out.v.push_back(std::move(v));
        out.v_x.push_back(std::move(vx));
        out.residuals.push_back(std::move(res));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Diagnostics

struct ZetaSeries {
    std::vector<double> t, zeta, zeta1, zeta2;
};

namespace detail {

inline void running_max(std::vector<double>& v) {
    for (std::size_t k = 1; k < v.size(); ++k) v[k] = std::max(v[k], v[k - 1]);
}

/// H^K norm of a node-major field by repeated fourth-order differencing.
inline double hk_norm(const std::vector<double>& f, const Grid1D& g, int n, int K) {
    double s = 0;
    std::vector<double> d = f;
    for (int k = 0; k <= K; ++k) {
        double l2 = node_major_norm(d, g, n, 2.0);
        s += l2 * l2;
        if (k < K) d = node_major_derivative(d, g, n);
    }
    return std::sqrt(s);
}

inline double wk_inf(const std::vector<double>& f, const Grid1D& g, int K) {
    double s = 0;
    std::vector<double> d = f;
    for (int k = 0; k <= K; ++k) {
        for (double x : d) s = std::max(s, std::abs(x));
        if (k < K) d = derivative4(d, g.h());
    }
    return s;
}

}  // namespace detail

/// zeta from the scalar phase; zeta1, zeta2 from the field phase when present.
/// The |u|_{L^p} factor in zeta uses max(L1, Linf), which dominates every p in between.
/// zeta2 uses the weight exp(|x|^2 / (2M(1+s))) on |x| <= x_half.
inline ZetaSeries zeta_diagnostics(const PhaseSeries& ph, const PhaseField* field, double eta0, int K, double M,
                                   double x_half) {
    ZetaSeries z;
    z.t = ph.t;
    for (std::size_t k = 0; k < ph.t.size(); ++k)
        z.zeta.push_back((std::max(ph.u_l1[k], ph.u_inf[k]) + std::abs(ph.alpha_dot[k])) * std::exp(eta0 * ph.t[k]));
    detail::running_max(z.zeta);
    if (!field) return z;
    const Grid1D& g = field->grid;
    const int n = field->n;
    for (std::size_t k = 0; k < field->t.size(); ++k) {
        const double s = field->t[k];
        double ha = std::hypot(detail::hk_norm(field->alpha_t[k], g, 1, K), detail::hk_norm(field->alpha_x[k], g, 1, K));
        z.zeta1.push_back(detail::hk_norm(field->v[k], g, n, K) * std::exp(eta0 * s) + ha * std::pow(1 + s, 0.75));

        auto vxx = detail::node_major_derivative(field->v_x[k], g, n);
        double pw = 0;
        for (std::size_t i = 0; i < g.N; ++i) {
            double x = g.x(i);
            if (std::abs(x) > x_half) continue;
            double m = 0;
            for (int c = 0; c < n; ++c)
                m = std::max({m, std::abs(field->v[k][i * n + c]), std::abs(field->v_x[k][i * n + c]),
                              std::abs(vxx[i * n + c])});
            pw = std::max(pw, m * std::exp(0.5 * eta0 * s + x * x / (2 * M * (1 + s))));
        }
        pw *= std::sqrt(1 + s);
        double a3 = detail::wk_inf(field->alpha[k], g, 3);
        double d3 = std::max(detail::wk_inf(field->alpha_t[k], g, 3), detail::wk_inf(field->alpha_x[k], g, 3));
        z.zeta2.push_back(pw + a3 + d3 * std::sqrt(1 + s));
    }
    detail::running_max(z.zeta1);
    detail::running_max(z.zeta2);
    return z;
}

// ---------------------------------------------------------------------------
// Experiments

enum class PerturbationFamily { gaussian, sech, translate, derivative, zero, custom };

inline PerturbationFamily perturbation_family(const std::string& s) {
    if (s == "gaussian") return PerturbationFamily::gaussian;
    if (s == "sech") return PerturbationFamily::sech;
    if (s == "translate") return PerturbationFamily::translate;
    if (s == "derivative") return PerturbationFamily::derivative;
    if (s == "zero") return PerturbationFamily::zero;
    if (s == "custom") return PerturbationFamily::custom;
    fail(ErrorKind::invalid_argument, "unknown perturbation family '" + s + "'");
}

struct ExperimentSpec {
    PerturbationFamily family = PerturbationFamily::gaussian;
    double amplitude = 0.005;  ///< Gaussian/sech/derivative amplitude, or the shift for translate
    double M = 8.0;            ///< Gaussian width: amplitude exp(-x^2/M)
    PdeOptions pde;
    bool field = true;
    FieldOptions field_options;
    std::vector<double> custom;  ///< node-major u0 for the custom family
    int K = 1;                   ///< Sobolev order for zeta1 and the damping check
    double zeta2_x_half = 12.0;
};

/// Initial perturbation u~(x,0) - u_bar(x), node-major.
inline std::vector<double> make_perturbation(const FrontProfile& p, const ExperimentSpec& e) {
    const std::size_t N = p.grid.N;
    std::vector<double> u0(N * p.n, 0.0);
    switch (e.family) {
        case PerturbationFamily::gaussian:
            require(e.M > 0, ErrorKind::invalid_argument, "Gaussian width M must be positive");
            for (std::size_t i = 0; i < N; ++i)
                for (int c = 0; c < p.n; ++c) u0[i * p.n + c] = e.amplitude * std::exp(-p.grid.x(i) * p.grid.x(i) / e.M);
            break;
        case PerturbationFamily::sech:
            for (std::size_t i = 0; i < N; ++i)
                for (int c = 0; c < p.n; ++c) u0[i * p.n + c] = e.amplitude / std::cosh(p.grid.x(i));
            break;
        case PerturbationFamily::derivative:
            for (std::size_t r = 0; r < N * p.n; ++r) u0[r] = e.amplitude * p.u_bar_prime[r];
            break;
        case PerturbationFamily::translate: {
            SnapshotInterpolant s(p.grid, p.n, p.u_bar);
            for (std::size_t i = 0; i < N; ++i)
                for (int c = 0; c < p.n; ++c) u0[i * p.n + c] = s.value(c, p.grid.x(i) - e.amplitude) - p.u(i, c);
            break;
        }
        case PerturbationFamily::zero: break;
        case PerturbationFamily::custom:
            require(e.custom.size() == u0.size(), ErrorKind::invalid_argument, "custom perturbation has the wrong size");
            u0 = e.custom;
            break;
    }
    return u0;
}

struct NonlinearRun {
    Trajectory trajectory;
    std::vector<double> u0;
    double E0 = 0.0;  ///< pointwise amplitude for Gaussian data, max(L1, Linf) otherwise
    double eta0 = 0.0;
    double M = 0.0;
    int K = 1;
    /// Resolution of v = u~ - u_bar: the discrete steady state differs from u_bar by the profile residual,
    /// which drifts at most linearly in t along the neutral mode; 1e3 machine epsilons of the state otherwise.
    double noise_floor = 0.0;
    PhaseSeries phase;
    PhaseFit fit;
    std::optional<PhaseField> field;
    ZetaSeries zeta;
};

inline NonlinearRun run_nonlinear(const ReactionSystem& sys, const FrontProfile& p, const SpectralData& sd,
                                  const ExperimentSpec& e) {
    NonlinearRun run;
    run.u0 = make_perturbation(p, e);
    run.E0 = e.family == PerturbationFamily::gaussian
                 ? std::abs(e.amplitude)
                 : std::max(node_major_norm(run.u0, p.grid, p.n, 1.0), node_major_norm(run.u0, p.grid, p.n, INFINITY));
    run.eta0 = sd.eta0;
    run.M = e.M;
    run.K = e.K;
    std::vector<double> init(run.u0.size());
    for (std::size_t r = 0; r < init.size(); ++r) init[r] = p.u_bar[r] + run.u0[r];
    double state = 1.0;
    for (double x : init) state = std::max(state, std::abs(x));
    run.noise_floor = std::max(1e3 * std::numeric_limits<double>::epsilon() * state,
                               10.0 * (1.0 + e.pde.T_end) * p.residual_sup);
    run.trajectory = evolve_pde(sys, p, init, e.pde);
    run.phase = extract_phase_integral(sys, run.trajectory, p, sd);
    run.fit = extract_phase_fit(run.trajectory, p);
    if (e.field) run.field = extract_phase_field(sys, run.trajectory, p, sd, e.field_options);
    run.zeta = zeta_diagnostics(run.phase, run.field ? &*run.field : nullptr, sd.eta0, e.K, e.M > 0 ? e.M : 8.0,
                                e.zeta2_x_half);
    return run;
}

// ---------------------------------------------------------------------------
// Verification reports

namespace detail {

/// Decay rate of a positive series over t >= t0, ignoring values below floor.
inline double tail_rate(const std::vector<double>& t, const std::vector<double>& v, double t0, double floor) {
    std::vector<double> tt, vv;
    for (std::size_t k = 0; k < t.size(); ++k)
        if (t[k] >= t0 && std::abs(v[k]) > floor) {
            tt.push_back(t[k]);
            vv.push_back(std::abs(v[k]));
        }
    if (tt.size() < 3) return std::numeric_limits<double>::quiet_NaN();
    return decay_rate(tt, vv);
}

inline double max_abs(std::span<const double> v) {
    double m = 0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace detail

struct OrbitalDecayReport {
    double eta0 = 0.0;
    double t_fit = 5.0;
    double rate_l1 = 0.0, rate_l2 = 0.0, rate_inf = 0.0;
    double alpha_inf = 0.0;
    double alpha_tail_rate = 0.0;
    double alpha_dot_rate = 0.0;
    double C_alpha_dot = 0.0;  ///< sup |alpha_dot| e^{eta0 t} / E0
    double C_uniform = 0.0;    ///< sup_t ||u~ - u_bar||_{L1 cap Linf} / E0
    double sup_zeta = 0.0;
    double zeta_over_E0 = 0.0;
    bool pass = false;
};

/// Rates of ||u~(.,t) - u_bar(. - alpha(t))||_{Lp} on [t_fit, T_end] against eta0. Series are cut at
/// floor_rel times their initial size, below which the phase quadrature error dominates.
inline OrbitalDecayReport verify_orbital_decay(const NonlinearRun& run, const FrontProfile& p, double t_fit = 5.0,
                                               double floor_rel = 1e-7) {
    OrbitalDecayReport r;
    r.eta0 = run.eta0;
    r.t_fit = t_fit;
    const auto& ph = run.phase;
    const double E0 = run.E0 > 0 ? run.E0 : 1.0;
    r.rate_l1 = detail::tail_rate(ph.t, ph.u_l1, t_fit, floor_rel * std::max(ph.u_l1.front(), 1e-300));
    r.rate_l2 = detail::tail_rate(ph.t, ph.u_l2, t_fit, floor_rel * std::max(ph.u_l2.front(), 1e-300));
    r.rate_inf = detail::tail_rate(ph.t, ph.u_inf, t_fit, floor_rel * std::max(ph.u_inf.front(), 1e-300));
    r.alpha_inf = alpha_limit(ph);
    std::vector<double> dev(ph.t.size());
    double amax = 0;
    for (std::size_t k = 0; k < ph.t.size(); ++k) {
        dev[k] = ph.alpha[k] - r.alpha_inf;
        amax = std::max(amax, std::abs(ph.alpha[k]));
    }
    r.alpha_tail_rate = detail::tail_rate(ph.t, dev, t_fit, 1e-12 * std::max(amax, 1e-300));
    r.alpha_dot_rate = detail::tail_rate(ph.t, ph.alpha_dot, t_fit, 1e-12 * std::max(detail::max_abs(ph.alpha_dot), 1e-300));
    for (std::size_t k = 0; k < ph.t.size(); ++k)
        r.C_alpha_dot = std::max(r.C_alpha_dot, std::abs(ph.alpha_dot[k]) * std::exp(run.eta0 * ph.t[k]) / E0);
    const auto& tr = run.trajectory;
    for (std::size_t k = 0; k < tr.size(); ++k) {
        std::vector<double> d(tr.u[k].size());
        for (std::size_t q = 0; q < d.size(); ++q) d[q] = tr.u[k][q] - p.u_bar[q];
        r.C_uniform = std::max(r.C_uniform, std::max(node_major_norm(d, p.grid, p.n, 1.0),
                                                     node_major_norm(d, p.grid, p.n, INFINITY)) / E0);
    }
    r.sup_zeta = run.zeta.zeta.empty() ? 0.0 : run.zeta.zeta.back();
    r.zeta_over_E0 = r.sup_zeta / E0;
    auto ok = [&](double rate) { return std::isfinite(rate) && rate >= run.eta0; };
    r.pass = ok(r.rate_l2) && ok(r.rate_inf) && ok(r.alpha_tail_rate) && std::isfinite(r.C_alpha_dot) &&
             std::isfinite(r.C_uniform) && std::isfinite(r.zeta_over_E0);
    return r;
}

/// (x, t) box for the pointwise Gaussian templates; doubling doubles |x| and the t range.
struct FieldBox {
    double x_half = 10.0;
    double t_lo = 0.0, t_hi = 10.0;

    [[nodiscard]] FieldBox doubled() const { return {2 * x_half, t_lo, t_lo + 2 * (t_hi - t_lo)}; }
    [[nodiscard]] bool contains(double x, double t) const {
        return std::abs(x) <= x_half + 1e-9 && t >= t_lo - 1e-9 && t <= t_hi + 1e-9;
    }
};

enum class FieldTemplate { v_gaussian, alpha_errfn, alpha_gaussians };

inline const char* to_string(FieldTemplate k) {
    switch (k) {
        case FieldTemplate::v_gaussian: return "v_gaussian";
        case FieldTemplate::alpha_errfn: return "alpha_errfn";
        case FieldTemplate::alpha_gaussians: return "alpha_gaussians";
    }
    return "unknown";
}

/// Template without the C E0 factor:
///  v_gaussian      (1+t)^{-1/2} exp(-eta0 t/2 - x^2/(2M(1+t)))
///  alpha_errfn     errfn((x+t)/sqrt(Mt)) - errfn((x-t)/sqrt(Mt))
///  alpha_gaussians exp(-(x+t)^2/(Mt)) + exp(-(x-t)^2/(Mt))
inline double field_template(FieldTemplate k, double x, double t, double M, double eta0) {
    switch (k) {
        case FieldTemplate::v_gaussian:
            return std::exp(-0.5 * eta0 * t - x * x / (2 * M * (1 + t))) / std::sqrt(1 + t);
        case FieldTemplate::alpha_errfn: {
            double s = std::sqrt(M * t);
            return errfn((x + t) / s) - errfn((x - t) / s);
        }
        case FieldTemplate::alpha_gaussians:
            return std::exp(-(x + t) * (x + t) / (M * t)) + std::exp(-(x - t) * (x - t) / (M * t));
    }
    return 0.0;
}

/// x-integral of the template at t = 1, used to compare fits across widths.
inline double field_template_mass(FieldTemplate k, double M, double eta0) {
    switch (k) {
        case FieldTemplate::v_gaussian: return std::exp(-0.5 * eta0) * std::sqrt(2 * std::numbers::pi * M);
        case FieldTemplate::alpha_errfn: return 2.0;
        case FieldTemplate::alpha_gaussians: return 2 * std::sqrt(std::numbers::pi * M);
    }
    return 0.0;
}

struct FieldSample {
    double x = 0.0, t = 0.0, q = 0.0;
};

struct FieldBoundFit {
    std::string name;
    double C = 0.0, M = 0.0;
    double sup_ratio = 0.0;
    double size = 0.0;  ///< C times the template mass at t = 1
    double C_doubled = 0.0, M_doubled = 0.0;
    double refined_change = 0.0, refined_ratio = 0.0;
    std::size_t samples = 0;
    bool stable = false;
    bool pass = false;
};

/// Smallest C with q <= C E0 template over the samples, with M chosen from 2^k, k = -4..10, by minimal size.
/// Widths whose sup ratio sits on the outermost |x| of the samples are passed over while any other width
/// attains its sup inside: their constant is set by the box edge rather than by the field.
inline FieldBoundFit fit_field_bound(FieldTemplate k, const std::vector<FieldSample>& s, double E0, double eta0) {
    FieldBoundFit best;
    best.name = to_string(k);
    best.samples = s.size();
    best.size = std::numeric_limits<double>::infinity();
    double x_edge = 0;
    for (const auto& x : s) x_edge = std::max(x_edge, std::abs(x.x));
    bool any = false, best_edge = true;
    for (int e = -4; e <= 10; ++e) {
        double M = std::ldexp(1.0, e), C = 0.0, x_arg = 0.0;
        for (const auto& x : s) {
            double tv = field_template(k, x.x, x.t, M, eta0);
            double r = tv > 0 ? x.q / (E0 * tv) : (x.q > 0 ? std::numeric_limits<double>::infinity() : 0.0);
            if (r > C) {
                C = r;
                x_arg = x.x;
            }
        }
        bool edge = std::abs(x_arg) >= x_edge - 1e-9;
        double size = C * field_template_mass(k, M, eta0);
        if (!any || (best_edge && !edge) || (edge == best_edge && size < best.size)) {
            best.C = C;
            best.M = M;
            best.size = size;
            best_edge = edge;
            any = true;
        }
    }
    best.sup_ratio = 0;
    for (const auto& x : s) {
        double tv = best.C * E0 * field_template(k, x.x, x.t, best.M, eta0);
        if (x.q > 0) best.sup_ratio = std::max(best.sup_ratio, tv > 0 ? x.q / tv : std::numeric_limits<double>::infinity());
    }
    return best;
}

struct PointwiseGaussianReport {
    FieldBoundFit v, alpha, alpha_x;
    std::vector<double> argmax_t, argmax_x;
    bool localized = true;
    bool pass = false;
};

namespace detail {

/// |field| samples inside the box; values below max(floor_rel * field maximum, floor_abs) count as numerical zero.
inline std::vector<FieldSample> field_samples(const PhaseField& f, const std::vector<std::vector<double>>& data, int n,
                                              const FieldBox& box, double t_min, double floor_rel,
                                              double floor_abs = 0.0) {
    double top = 0;
    for (const auto& d : data) top = std::max(top, max_abs(d));
    const double floor = std::max(floor_rel * top, floor_abs);
    std::vector<FieldSample> out;
    for (std::size_t k = 0; k < f.t.size(); ++k) {
        if (f.t[k] < t_min - 1e-9) continue;
        for (std::size_t i = 0; i < f.grid.N; ++i) {
            double x = f.grid.x(i);
            if (!box.contains(x, f.t[k])) continue;
            double q = 0;
            for (int c = 0; c < n; ++c) q = std::max(q, std::abs(data[k][i * n + c]));
            if (q <= floor) continue;
            out.push_back({x, f.t[k], q});
        }
    }
    return out;
}

inline void refine_field_fit(FieldTemplate k, FieldBoundFit& base, const std::vector<FieldSample>& big, double E0,
                             double eta0, double tol) {
    auto ref = fit_field_bound(k, big, E0, eta0);
    base.C_doubled = ref.C;
    base.M_doubled = ref.M;
    base.refined_change = base.size > 0 ? std::abs(ref.size - base.size) / base.size : (ref.size > 0 ? 1.0 : 0.0);
    base.refined_ratio = 0;
    for (const auto& x : big) {
        double tv = base.C * E0 * field_template(k, x.x, x.t, base.M, eta0);
        if (x.q > 0) base.refined_ratio = std::max(base.refined_ratio, tv > 0 ? x.q / tv : std::numeric_limits<double>::infinity());
    }
    base.stable = base.refined_change < tol && base.refined_ratio < 1 + tol;
    base.pass = std::isfinite(base.C) && std::isfinite(base.sup_ratio) && base.sup_ratio <= 1 + 1e-9 && base.stable;
}

}  // namespace detail

/// Sup-ratio fits of v, alpha~ and alpha~_x against their Gaussian templates on a box and its doubling.
/// The alpha~ templates are sampled for t >= 1, where alpha~ is switched on. |v| below the run's noise floor
/// is treated as zero.
inline PointwiseGaussianReport verify_pointwise_gaussian(const NonlinearRun& run, const FieldBox& box = {},
                                                         double floor_rel = 1e-12, double tol = 0.1) {
    require(run.field.has_value(), ErrorKind::invalid_argument, "run has no field phase");
    const auto& f = *run.field;
    const double v_floor = run.noise_floor;
    PointwiseGaussianReport r;
    const double E0 = run.E0 > 0 ? run.E0 : 1.0;
    const FieldBox big = box.doubled();
    struct Item {
        FieldTemplate k;
        const std::vector<std::vector<double>>* data;
        int n;
        double t_min;
        double floor_abs;
        FieldBoundFit* out;
    };
    for (const Item& it : {Item{FieldTemplate::v_gaussian, &f.v, f.n, 0.0, v_floor, &r.v},
                           Item{FieldTemplate::alpha_errfn, &f.alpha, 1, 1.0, 0.0, &r.alpha},
                           Item{FieldTemplate::alpha_gaussians, &f.alpha_x, 1, 1.0, 0.0, &r.alpha_x}}) {
        auto sb = detail::field_samples(f, *it.data, it.n, box, it.t_min, floor_rel, it.floor_abs);
        auto sf = detail::field_samples(f, *it.data, it.n, big, it.t_min, floor_rel, it.floor_abs);
        *it.out = fit_field_bound(it.k, sb, E0, run.eta0);
        detail::refine_field_fit(it.k, *it.out, sf, E0, run.eta0, tol);
        if (sb.empty()) {
            it.out->C = 0;
            it.out->sup_ratio = 0;
            it.out->stable = true;
            it.out->pass = true;
        }
    }
    const double M = run.M > 0 ? run.M : r.alpha_x.M;
    for (std::size_t k = 0; k < f.t.size(); ++k) {
        double t = f.t[k];
        if (t < 5.0 - 1e-9 || t > 20.0 + 1e-9) continue;
        std::size_t im = 0;
        double best = -1;
        for (std::size_t i = 0; i < f.grid.N; ++i)
            if (std::abs(f.alpha_x[k][i]) > best) {
                best = std::abs(f.alpha_x[k][i]);
                im = i;
            }
        if (best <= 0) continue;
        double x = f.grid.x(im);
        r.argmax_t.push_back(t);
        r.argmax_x.push_back(x);
        double lim = 2 * std::sqrt(M * t);
        if (std::abs(x - t) > lim && std::abs(x + t) > lim) r.localized = false;
    }
    r.pass = r.v.pass && r.alpha.pass && r.alpha_x.pass && r.localized;
    return r;
}

struct DampingReport {
    int K = 1;
    double theta = 0.0;
    double C = 0.0;       ///< max lhs / rhs on the full sampling
    double C_half = 0.0;  ///< same on every other sample
    double change = 0.0;
    std::vector<double> t, lhs, rhs;
    bool stable = false;
    bool pass = false;
};

namespace detail {

/// lhs = ||v||^2_{H^K}; rhs = e^{-theta t}||v0||^2_{H^K} + int_0^t e^{-theta (t-s)} (||v||^2_{L2} + ||(a_t, a_x)||^2_{H^K}) ds.
inline void damping_sides(const PhaseField& f, int K, double theta, std::size_t step, std::vector<double>& t,
                          std::vector<double>& lhs, std::vector<double>& rhs) {
    const Grid1D& g = f.grid;
    std::vector<double> src;
    t.clear();
    lhs.clear();
    rhs.clear();
    for (std::size_t k = 0; k < f.t.size(); k += step) {
        t.push_back(f.t[k]);
        double hv = hk_norm(f.v[k], g, f.n, K);
        double l2 = node_major_norm(f.v[k], g, f.n, 2.0);
        double ha = hk_norm(f.alpha_t[k], g, 1, K), hx = hk_norm(f.alpha_x[k], g, 1, K);
        lhs.push_back(hv * hv);
        src.push_back(l2 * l2 + ha * ha + hx * hx);
    }
    for (std::size_t k = 0; k < t.size(); ++k) {
        double integral = 0;
        for (std::size_t j = 0; j + 1 <= k; ++j) {
            double a = std::exp(-theta * (t[k] - t[j])) * src[j], b = std::exp(-theta * (t[k] - t[j + 1])) * src[j + 1];
            integral += 0.5 * (t[j + 1] - t[j]) * (a + b);
        }
        rhs.push_back(std::exp(-theta * t[k]) * lhs[0] + integral);
    }
}

inline double damping_constant(const std::vector<double>& lhs, const std::vector<double>& rhs) {
    double C = 0;
    for (std::size_t k = 0; k < lhs.size(); ++k) {
        if (lhs[k] == 0) continue;
        C = std::max(C, rhs[k] > 0 ? lhs[k] / rhs[k] : std::numeric_limits<double>::infinity());
    }
    return C;
}

}  // namespace detail

/// Minimal C with lhs <= C rhs along the trajectory; stability compares the full sampling with every other sample.
inline DampingReport damping_check(const NonlinearRun& run, int K, double tol = 0.1) {
    require(run.field.has_value(), ErrorKind::invalid_argument, "run has no field phase");
    require(K >= 1 && K <= 2, ErrorKind::invalid_argument, "damping order must be 1 or 2");
    DampingReport r;
    r.K = K;
    r.theta = run.eta0;
    detail::damping_sides(*run.field, K, r.theta, 1, r.t, r.lhs, r.rhs);
    r.C = detail::damping_constant(r.lhs, r.rhs);
    std::vector<double> t2, l2, r2;
    detail::damping_sides(*run.field, K, r.theta, 2, t2, l2, r2);
    r.C_half = detail::damping_constant(l2, r2);
    r.change = r.C > 0 ? std::abs(r.C_half - r.C) / r.C : (r.C_half > 0 ? 1.0 : 0.0);
    r.stable = r.change < tol;
    r.pass = std::isfinite(r.C) && r.stable;
    return r;
}

/// Quadratic and bilinear prefactors of the residual terms:
/// C_Q = sup ||Q|| / ||v||^2, C_S = sup ||S|| / (||v|| ||a_x||), C_T = sup ||T|| / (||v|| ||a_x||),
/// over snapshots whose ||v||_inf exceeds floor_rel of its maximum.
struct ResidualConstants {
    double C_Q = 0.0, C_S = 0.0, C_T = 0.0;
};

inline ResidualConstants residual_constants(const PhaseField& f, double floor_rel = 1e-3) {
    ResidualConstants c;
    double vmax = 0;
    for (const auto& v : f.v) vmax = std::max(vmax, detail::max_abs(v));
    for (std::size_t k = 0; k < f.t.size(); ++k) {
        double v = detail::max_abs(f.v[k]), ax = detail::max_abs(f.alpha_x[k]);
        if (v <= floor_rel * vmax || v == 0) continue;
        c.C_Q = std::max(c.C_Q, detail::max_abs(f.residuals[k].Q) / (v * v));
        if (ax > 0) {
            c.C_S = std::max(c.C_S, detail::max_abs(f.residuals[k].S) / (v * ax));
            c.C_T = std::max(c.C_T, detail::max_abs(f.residuals[k].T) / (v * ax));
        }
    }
    return c;
}

}  // namespace frontstab
