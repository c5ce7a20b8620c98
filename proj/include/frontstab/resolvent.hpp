#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "frontstab/error.hpp"
#include "frontstab/model.hpp"
#include "frontstab/numerics.hpp"
#include "frontstab/profile.hpp"
#include "frontstab/spectral.hpp"

namespace frontstab {

/// Small complex matrix; n <= 3 keeps every block inside 6 x 6 without heap use.
using SmallMat = Eigen::Matrix<cd, Eigen::Dynamic, Eigen::Dynamic, 0, 6, 6>;

/// S = [[0, I], [-I, 0]]; Z S W is constant for adjoint rows Z and solutions W.
inline SmallMat pairing_matrix(int n) {
    SmallMat S = SmallMat::Zero(2 * n, 2 * n);
    for (int k = 0; k < n; ++k) {
        S(k, n + k) = 1.0;
        S(n + k, k) = -1.0;
    }
    return S;
}

struct ModeOptions {
    int renorm_every = 50;        ///< QR renormalization period in grid steps
    double substep_scale = 0.5;   ///< substeps per cell: ceil(h sqrt(|lambda| + |sigma|max) / substep_scale)
    double cond_limit = 1e12;
    double degenerate_tol = 1e-7;   ///< relative smallest singular value of (Phi+, Phi-) at x = 0
    std::size_t stride = 1;       ///< mode grid uses every stride-th profile node
};

namespace detail {

/// Basis of k solutions swept in one direction. W(x_i) = B_i C_{blk(i)}, C_k = R_k C_{k-1},
/// C_0 = exp(log0) * C0. Row families are stored transposed.
struct ModeFamily {
    int dir = -1;
    std::size_t start = 0, stop = 0;
    std::vector<SmallMat> B;
    std::vector<int> blk;
    std::vector<SmallMat> R, Rinv;  // index 0 unused
    SmallMat C0;
    double log0 = 0.0;

    [[nodiscard]] bool visited(std::size_t i) const {
        return dir < 0 ? (i <= start && i >= stop) : (i >= start && i <= stop);
    }
    /// C_{blk(i)} C_{blk(ref)}^{-1}
    [[nodiscard]] SmallMat coef(std::size_t i, std::size_t ref) const {
        const Eigen::Index k = B[i].cols();
        SmallMat T = SmallMat::Identity(k, k);
        int a = blk[i], b = blk[ref];
        if (a <= b) {
            for (int q = a + 1; q <= b; ++q) {
                T = T * Rinv[q];
                if (T.cwiseAbs().maxCoeff() < 1e-300) return SmallMat::Zero(k, k);
            }
        } else {
            for (int q = a; q > b; --q) T = T * R[q];
        }
        return T;
    }
    /// True-scale factor C_{blk(i)} as exp(lg) * returned matrix.
    [[nodiscard]] SmallMat scale(std::size_t i, double& lg) const {
        SmallMat M = C0;
        lg = log0;
        for (int q = 1; q <= blk[i]; ++q) {
            M = R[q] * M;
            double s = M.cwiseAbs().maxCoeff();
            if (s > 0) {
                M /= s;
                lg += std::log(s);
            }
        }
        return M;
    }
    [[nodiscard]] SmallMat value(std::size_t i) const {
        double lg = 0;
        SmallMat c = scale(i, lg);
        return B[i] * c * std::exp(lg);
    }
};

/// (S X S^{-1}) for a 2n x 2n block matrix X = [[a, b], [c, d]] gives [[d, -c], [-b, a]].
inline SmallMat conj_pairing(const SmallMat& X, int n) {
    SmallMat Y(2 * n, 2 * n);
    Y.topLeftCorner(n, n) = X.bottomRightCorner(n, n);
    Y.topRightCorner(n, n) = -X.bottomLeftCorner(n, n);
    Y.bottomLeftCorner(n, n) = -X.topRightCorner(n, n);
    Y.bottomRightCorner(n, n) = X.topLeftCorner(n, n);
    return Y;
}

inline SmallMat upper_inverse(const SmallMat& R) {
    const Eigen::Index k = R.rows();
    SmallMat I = SmallMat::Identity(k, k);
    return R.triangularView<Eigen::Upper>().solve(I);
}

struct SweepResult {
    ModeFamily family;
    SmallMat secondary;  ///< true-scale secondary block at the matching node (modulo the primary span)
};

/// Propagates [primary | secondary] from start to stop; the secondary block is carried only up to
/// `match` and is kept modulo the primary span. step(i, j) returns the propagator from node i to j.
template <class Step>
SweepResult sweep(std::size_t N, std::size_t start, std::size_t stop, std::size_t match, const SmallMat& P1_seed,
                  const SmallMat& C1, double log1, const SmallMat& P2_seed, const SmallMat& C2, double log2,
                  const Step& step, const ModeOptions& opt) {
    SweepResult out;
    ModeFamily& F = out.family;
    F.dir = stop >= start ? 1 : -1;
    F.start = start;
    F.stop = stop;
    F.B.resize(N);
    F.blk.assign(N, 0);
    F.R.emplace_back();
    F.Rinv.emplace_back();
    F.C0 = C1;
    F.log0 = log1;
    const Eigen::Index k = P1_seed.cols();
    const Eigen::Index k2 = P2_seed.cols();
    SmallMat P1 = P1_seed, P2 = P2_seed, S2 = C2;
    double lg2 = log2;
    bool carry = k2 > 0;
    F.B[start] = P1;
    if (carry && start == match) out.secondary = P2 * S2 * std::exp(lg2);
    int count = 0, block = 0;
    for (std::size_t i = start; i != stop;) {
        std::size_t j = F.dir > 0 ? i + 1 : i - 1;
        SmallMat U = step(i, j);
        P1 = U * P1;
        if (carry) P2 = U * P2;
        if (!P1.allFinite() || (carry && !P2.allFinite()))
            fail(ErrorKind::overflow_uncontrolled, "mode integration overflowed between renormalizations");
        ++count;
        if (count % opt.renorm_every == 0 || j == stop) {
            Eigen::HouseholderQR<SmallMat> qr(P1);
            SmallMat Q = qr.householderQ() * SmallMat::Identity(P1.rows(), k);
            SmallMat Rk = qr.matrixQR().topRows(k).template triangularView<Eigen::Upper>();
            double dmax = 0, dmin = std::numeric_limits<double>::infinity();
            for (Eigen::Index q = 0; q < k; ++q) {
                dmax = std::max(dmax, std::abs(Rk(q, q)));
                dmin = std::min(dmin, std::abs(Rk(q, q)));
            }
            if (!(dmin > 0) || dmax / dmin > opt.cond_limit)
                fail(ErrorKind::overflow_uncontrolled, "renormalization cannot keep the basis conditioned");
            if (carry) {
                P2 -= Q * (Q.adjoint() * P2);
                Eigen::HouseholderQR<SmallMat> qr2(P2);
                SmallMat Q2 = qr2.householderQ() * SmallMat::Identity(P2.rows(), k2);
                SmallMat R2 = qr2.matrixQR().topRows(k2).template triangularView<Eigen::Upper>();
                P2 = Q2;
                S2 = R2 * S2;
                double s = S2.cwiseAbs().maxCoeff();
                if (s > 0) {
                    S2 /= s;
                    lg2 += std::log(s);
                }
            }
            P1 = Q;
            ++block;
            F.R.push_back(Rk);
            F.Rinv.push_back(upper_inverse(Rk));
        }
        F.B[j] = P1;
        F.blk[j] = block;
        if (carry && j == match) {
            out.secondary = P2 * S2 * std::exp(lg2);
            carry = false;
        }
        i = j;
    }
    return out;
}

/// Columns normalized to unit norm, norms moved into a diagonal factor with a common log scale.
inline void split_seed(const SmallMat& V, const std::vector<cd>& exps, double x, SmallMat& P, SmallMat& C,
                       double& lg) {
    const Eigen::Index k = V.cols();
    P = V;
    lg = -std::numeric_limits<double>::infinity();
    std::vector<double> logs(static_cast<std::size_t>(k));
    for (Eigen::Index q = 0; q < k; ++q) {
        double nv = P.col(q).norm();
        P.col(q) /= nv;
        logs[q] = (exps[q] * x).real() + std::log(nv);
        lg = std::max(lg, logs[q]);
    }
    C = SmallMat::Zero(k, k);
    for (Eigen::Index q = 0; q < k; ++q)
        C(q, q) = std::exp(logs[q] - lg) * std::exp(cd(0, (exps[q] * x).imag()));
}

inline SmallMat magnus_exp(const SmallMat& Omega, int n) {
    if (n == 1) {
        cd a = Omega(0, 0), b = Omega(0, 1), c = Omega(1, 0);
        cd s2 = a * a + b * c;
        cd s = std::sqrt(s2);
        cd ch = std::cosh(s);
        cd sh = std::abs(s) < 1e-4 ? 1.0 + s2 / 6.0 + s2 * s2 / 120.0 : std::sinh(s) / s;
        SmallMat E(2, 2);
        E << ch + sh * a, sh * b, sh * c, ch - sh * a;
        return E;
    }
    Eigen::MatrixXcd O = Omega;
    Eigen::MatrixXcd E = O.exp();
    return E;
}

}  // namespace detail

/// Mode bases for one lambda on the mode grid.
struct ModeBasis {
    cd lambda;
    int n = 1;
    Grid1D grid;
    std::size_t i0 = 0;  ///< matching node (nearest to x = 0)
    ModeData modes;
    SmallMat S;
    detail::ModeFamily phi_plus, phi_minus;              ///< decaying at +inf / -inf (columns)
    detail::ModeFamily psi_tilde_plus, psi_tilde_minus;  ///< adjoint rows decaying at +inf / -inf (transposed)
    detail::ModeFamily psi_minus_left;                   ///< growing-at--inf columns on x <= 0
    detail::ModeFamily phi_tilde_minus_left;             ///< adjoint rows growing at -inf on x <= 0 (transposed)
    SmallMat Phi_plus0, Phi_minus0, Psi_plus0, Psi_minus0;                   ///< 2n x n at the matching node
    SmallMat Phi_tilde_plus0, Psi_tilde_plus0, Phi_tilde_minus0, Psi_tilde_minus0;  ///< n x 2n, dual at x = 0
    SmallMat K_plus, K_minus;  ///< Gram corrections applied to the integrated adjoint rows
    double duality_deviation = 0.0;

    /// Psi_tilde^-(x_i) with the duality normalization (valid on the whole grid).
    [[nodiscard]] SmallMat psi_tilde_minus_at(std::size_t i) const {
        return K_minus * (psi_tilde_minus.coef(i, i0)).transpose() * psi_tilde_minus.B[i].transpose();
    }
    [[nodiscard]] SmallMat psi_tilde_plus_at(std::size_t i) const {
        return K_plus * (psi_tilde_plus.coef(i, i0)).transpose() * psi_tilde_plus.B[i].transpose();
    }
    [[nodiscard]] SmallMat phi_plus_at(std::size_t i) const {
        double lg = 0;
        SmallMat c = phi_plus.scale(i0, lg);
        return phi_plus.B[i] * phi_plus.coef(i, i0) * c * std::exp(lg);
    }
    [[nodiscard]] SmallMat phi_minus_at(std::size_t i) const {
        double lg = 0;
        SmallMat c = phi_minus.scale(i0, lg);
        return phi_minus.B[i] * phi_minus.coef(i, i0) * c * std::exp(lg);
    }
    [[nodiscard]] SmallMat psi_minus_at(std::size_t i) const {
        require(i <= i0, ErrorKind::invalid_argument, "Psi^- is only swept on x <= 0");
        return psi_minus_left.value(i);
    }
    [[nodiscard]] SmallMat phi_tilde_minus_at(std::size_t i) const {
        require(i <= i0, ErrorKind::invalid_argument, "Phi_tilde^- is only swept on x <= 0");
        return phi_tilde_minus_left.value(i).transpose();
    }
};

/// Integrates the four stable mode families for a fixed profile; potential tables are shared across lambda.
class ModeIntegrator {
public:
    ModeIntegrator(const ReactionSystem& sys, const FrontProfile& p, ModeOptions opt = {})
        : sys_(sys), p_(p), opt_(opt), ends_(end_state_spectrum(sys)) {
        require(opt_.stride >= 1 && (p.grid.N - 1) % opt_.stride == 0, ErrorKind::invalid_argument,
                "mode stride must divide N - 1");
        require(opt_.renorm_every >= 1, ErrorKind::invalid_argument, "renormalization period must be positive");
        grid_ = Grid1D(p.grid.x_min, p.grid.x_max, (p.grid.N - 1) / opt_.stride + 1);
        for (int c = 0; c < p.n; ++c) {
            comp_.push_back(p.component(c));
            compp_.push_back(p.component(c, true));
        }
        for (int s = 0; s < ends_.sigma_plus.size(); ++s) sigma_max_ = std::max(sigma_max_, std::abs(ends_.sigma_plus[s]));
        for (int s = 0; s < ends_.sigma_minus.size(); ++s) sigma_max_ = std::max(sigma_max_, std::abs(ends_.sigma_minus[s]));
    }

    [[nodiscard]] const Grid1D& grid() const { return grid_; }
    [[nodiscard]] const EndStateSpectrum& ends() const { return ends_; }
    [[nodiscard]] const FrontProfile& profile() const { return p_; }
    [[nodiscard]] const ModeOptions& options() const { return opt_; }

    [[nodiscard]] int substeps(cd lambda) const {
        double r = grid_.h() * std::sqrt(std::abs(lambda) + sigma_max_) / opt_.substep_scale;
        return std::max(1, static_cast<int>(std::ceil(r)));
    }

    [[nodiscard]] ModeBasis integrate(cd lambda) const;

private:
    struct Table {
        int m = 0;
        std::vector<double> df;  // ((cell * m + s) * 2 + g) * n * n
    };

    const Table& table(int m) const {
        std::lock_guard<std::mutex> lock(mu_);
        auto it = tables_.find(m);
        if (it != tables_.end()) return it->second;
        const int n = p_.n;
        Table t;
        t.m = m;
        const std::size_t cells = grid_.N - 1;
        const double hs = grid_.h() / m;
        const double g1 = 0.5 - std::sqrt(3.0) / 6.0, g2 = 0.5 + std::sqrt(3.0) / 6.0;
        t.df.resize(cells * m * 2 * n * n);
        std::vector<double> u(n);
        for (std::size_t c = 0; c < cells; ++c)
            for (int s = 0; s < m; ++s)
                for (int g = 0; g < 2; ++g) {
                    double x = grid_.x(c) + hs * (s + (g == 0 ? g1 : g2));
                    for (int q = 0; q < n; ++q) u[q] = hermite_eval(p_.grid, comp_[q], compp_[q], x);
                    eval_jacobian_into(sys_, u,
                                       std::span<double>(t.df).subspan(((c * m + s) * 2 + g) * n * n, n * n));
                }
        return tables_.emplace(m, std::move(t)).first->second;
    }

    const ReactionSystem& sys_;
    const FrontProfile& p_;
    ModeOptions opt_;
    EndStateSpectrum ends_;
    Grid1D grid_;
    std::vector<std::vector<double>> comp_, compp_;
    double sigma_max_ = 0.0;
    mutable std::mutex mu_;
    mutable std::map<int, Table> tables_;
};

inline ModeBasis ModeIntegrator::integrate(cd lambda) const {
    const int n = p_.n;
    const int n2 = 2 * n;
    const std::size_t N = grid_.N;
    ModeBasis mb;
    mb.lambda = lambda;
    mb.n = n;
    mb.grid = grid_;
    mb.i0 = grid_.nearest(0.0);
    mb.modes = decay_exponents(ends_, lambda);
    mb.S = pairing_matrix(n);
    const std::size_t i0 = mb.i0;

    // per-cell propagators U (rightward) and U^{-1}
    const int m = substeps(lambda);
    const Table& tab = table(m);
    const double hs = grid_.h() / m;
    const double c3 = std::sqrt(3.0) / 12.0 * hs * hs;
    std::vector<SmallMat> U(N - 1), Uinv(N - 1);
    SmallMat A1 = SmallMat::Zero(n2, n2), A2 = SmallMat::Zero(n2, n2);
    for (int q = 0; q < n; ++q) A1(q, n + q) = A2(q, n + q) = 1.0;
    for (std::size_t c = 0; c + 1 < N; ++c) {
        SmallMat Uc = SmallMat::Identity(n2, n2);
        for (int s = 0; s < m; ++s) {
            const double* d1 = &tab.df[((c * m + s) * 2 + 0) * n * n];
            const double* d2 = &tab.df[((c * m + s) * 2 + 1) * n * n];
            for (int a = 0; a < n; ++a)
                for (int b = 0; b < n; ++b) {
                    A1(n + a, b) = (a == b ? lambda : cd(0)) - d1[a + b * n];
                    A2(n + a, b) = (a == b ? lambda : cd(0)) - d2[a + b * n];
                }
            SmallMat Om = (0.5 * hs) * (A1 + A2) + c3 * (A2 * A1 - A1 * A2);
            Uc = detail::magnus_exp(Om, n) * Uc;
        }
        U[c] = Uc;
        if (n == 1) {
            SmallMat Ui(2, 2);
            Ui << Uc(1, 1), -Uc(0, 1), -Uc(1, 0), Uc(0, 0);
            Uinv[c] = Ui;
        } else {
            Uinv[c] = Uc.inverse();
        }
    }
    auto col_step = [&](std::size_t i, std::size_t j) -> SmallMat { return j > i ? U[i] : Uinv[j]; };
    // rows propagate as Z_j = Z_i S U(i->j)^{-1} S^{-1}; transposed for column storage
    auto row_step = [&](std::size_t i, std::size_t j) -> SmallMat {
        return detail::conj_pairing(j > i ? Uinv[i] : U[j], n).transpose();
    };

    const SideModes& mp = mb.modes.plus;
    const SideModes& mm = mb.modes.minus;
    auto exps = [&](const SideModes& sm, int from, bool adjoint) {
        std::vector<cd> e;
        for (int q = 0; q < n; ++q) e.push_back(adjoint ? -sm.mu[from + q] : sm.mu[from + q]);
        return e;
    };
    const double xR = grid_.x_max, xL = grid_.x_min;
    SmallMat P1, C1, P2, C2;
    double l1 = 0, l2 = 0;

    // from +inf: [Phi+ | Psi+] leftward; Psi+ kept until the matching node
    detail::split_seed(mp.V.leftCols(n), exps(mp, 0, false), xR, P1, C1, l1);
    detail::split_seed(mp.V.rightCols(n), exps(mp, n, false), xR, P2, C2, l2);
    auto right = detail::sweep(N, N - 1, 0, i0, P1, C1, l1, P2, C2, l2, col_step, opt_);
    mb.phi_plus = std::move(right.family);
    mb.Psi_plus0 = right.secondary;

    // from -inf: [Phi- | Psi-] rightward
    detail::split_seed(mm.V.rightCols(n), exps(mm, n, false), xL, P1, C1, l1);
    detail::split_seed(mm.V.leftCols(n), exps(mm, 0, false), xL, P2, C2, l2);
    auto left = detail::sweep(N, 0, N - 1, i0, P1, C1, l1, P2, C2, l2, col_step, opt_);
    mb.phi_minus = std::move(left.family);
    mb.Psi_minus0 = left.secondary;

    const SmallMat none(n2, 0), none_c(0, 0);
    // adjoint rows decaying at +inf: exponent -mu_{n+j}
    detail::split_seed(mp.Vt.bottomRows(n).transpose(), exps(mp, n, true), xR, P1, C1, l1);
    mb.psi_tilde_plus = detail::sweep(N, N - 1, 0, i0, P1, C1, l1, none, none_c, 0.0, row_step, opt_).family;
    // adjoint rows decaying at -inf: exponent -mu_j
    detail::split_seed(mm.Vt.topRows(n).transpose(), exps(mm, 0, true), xL, P1, C1, l1);
    mb.psi_tilde_minus = detail::sweep(N, 0, N - 1, i0, P1, C1, l1, none, none_c, 0.0, row_step, opt_).family;

    mb.Phi_plus0 = mb.phi_plus_at(i0);
    mb.Phi_minus0 = mb.phi_minus_at(i0);

    // degenerate basis: lambda is (numerically) an eigenvalue
    {
        SmallMat W(n2, n2);
        W << mb.Phi_plus0, mb.Phi_minus0;
        for (Eigen::Index q = 0; q < n2; ++q) W.col(q).normalize();
        Eigen::JacobiSVD<SmallMat> svd(W);
        auto sv = svd.singularValues();
        if (!(sv[n2 - 1] > opt_.degenerate_tol * sv[0]))
            fail(ErrorKind::degenerate_basis, "(Phi+, Phi-) is numerically singular: lambda is an eigenvalue");
    }

    // dual bases at the matching node: inversion rows, then Gram-corrected integrated rows
    SmallMat Wm(n2, n2), Wp(n2, n2);
    Wm << mb.Phi_minus0, mb.Psi_minus0;
    Wp << mb.Phi_plus0, mb.Psi_plus0;
    SmallMat Dm = (mb.S * Wm).inverse();
    SmallMat Dp = (mb.S * Wp).inverse();
    mb.Phi_tilde_minus0 = Dm.topRows(n);
    mb.Phi_tilde_plus0 = Dp.topRows(n);
    SmallMat Zm0 = mb.psi_tilde_minus.B[i0].transpose();
    SmallMat Zp0 = mb.psi_tilde_plus.B[i0].transpose();
    mb.K_minus = (Zm0 * mb.S * mb.Psi_minus0).inverse();
    mb.K_plus = (Zp0 * mb.S * mb.Psi_plus0).inverse();
    mb.Psi_tilde_minus0 = mb.K_minus * Zm0;
    mb.Psi_tilde_plus0 = mb.K_plus * Zp0;
    {
        SmallMat Rm(n2, n2), Rp(n2, n2);
        Rm << mb.Phi_tilde_minus0, mb.Psi_tilde_minus0;
        Rp << mb.Phi_tilde_plus0, mb.Psi_tilde_plus0;
        SmallMat I = SmallMat::Identity(n2, n2);
        double scale = std::max({Wm.cwiseAbs().maxCoeff(), Wp.cwiseAbs().maxCoeff(), 1.0});
        mb.duality_deviation =
            std::max((Rm * mb.S * Wm - I).cwiseAbs().maxCoeff(), (Rp * mb.S * Wp - I).cwiseAbs().maxCoeff()) / scale;
    }

    // growing families on x <= 0, swept leftward from the matching node (stable direction)
    {
        SmallMat P = mb.Psi_minus0;
        double s = P.cwiseAbs().maxCoeff();
        SmallMat C = SmallMat::Identity(n, n);
        mb.psi_minus_left = detail::sweep(N, i0, 0, i0, P / s, C, std::log(s), none, none_c, 0.0, col_step, opt_).family;
        SmallMat Pt = mb.Phi_tilde_minus0.transpose();
        double st = Pt.cwiseAbs().maxCoeff();
        mb.phi_tilde_minus_left =
            detail::sweep(N, i0, 0, i0, Pt / st, C, std::log(st), none, none_c, 0.0, row_step, opt_).family;
    }
    return mb;
}

inline ModeBasis integrate_modes(const ReactionSystem& sys, const FrontProfile& p, cd lambda, const ModeOptions& opt = {}) {
    ModeIntegrator mi(sys, p, opt);
    return mi.integrate(lambda);
}

/// Four jump identities of the 2n x 2n block [[G, G_y], [G_x, G_xy]] across x = y.
struct JumpResiduals {
    double G = 0, G_x = 0, G_y = 0, G_xy = 0;
    [[nodiscard]] double max() const { return std::max({G, G_x, G_y, G_xy}); }
};

/// Resolvent kernel assembled from a mode basis.
struct ResolventAssembly {
    std::shared_ptr<const ModeBasis> modes;
    SmallMat M_plus, M_minus, d_plus, d_minus;
    SmallMat M_plus_kramer;       ///< (I,0)(Phi+,Phi-)^{-1} Psi-
    SmallMat M_minus_alt;         ///< Phi_tilde^- (Psi_tilde^-; Psi_tilde^+)^{-1} (0; I)
    SmallMat d_minus_derived;     ///< -M^- (Psi_tilde^+ S Psi^-)
    double kramer_deviation = 0.0;
    std::vector<SmallMat> A_plus, A_minus;  ///< per node: (Z S B)^{-1} Z with Z the normalized adjoint rows

    [[nodiscard]] cd lambda() const { return modes->lambda; }
    [[nodiscard]] int n() const { return modes->n; }
    [[nodiscard]] const Grid1D& grid() const { return modes->grid; }

    /// [[G, G_y], [G_x, G_xy]] at (x_i, y_j); for i == j `upper` selects the x -> y+ limit.
    [[nodiscard]] SmallMat block(std::size_t i, std::size_t j, bool upper = true) const {
        const ModeBasis& mb = *modes;
        if (i > j || (i == j && upper)) return mb.phi_plus.B[i] * mb.phi_plus.coef(i, j) * A_plus[j];
        return -(mb.phi_minus.B[i] * mb.phi_minus.coef(i, j) * A_minus[j]);
    }
    /// G_lambda(x_i, y_j) as an n x n matrix.
    [[nodiscard]] SmallMat G(std::size_t i, std::size_t j) const {
        const int n = modes->n;
        if (i != j) return block(i, j).topLeftCorner(n, n);
        return 0.5 * (block(i, j, true) + block(i, j, false)).topLeftCorner(n, n);
    }
    /// Blocks at (x_i, y_j) for every j in js (ascending), with products of renormalization factors
    /// accumulated incrementally; out[k] corresponds to js[k].
    void row(std::size_t i, std::span<const std::size_t> js, std::vector<SmallMat>& out) const {
        const ModeBasis& mb = *modes;
        const Eigen::Index n2 = 2 * mb.n;
        out.assign(js.size(), SmallMat());
        std::size_t split = std::lower_bound(js.begin(), js.end(), i) - js.begin();
        // j <= i: decaying-at-+inf branch, swept leftward (blk grows as j decreases)
        SmallMat T = SmallMat::Identity(n2 / 2, n2 / 2);
        int q = mb.phi_plus.blk[i];
        SmallMat Bp = mb.phi_plus.B[i];
        for (std::size_t k = split + (split < js.size() && js[split] == i ? 1 : 0); k-- > 0;) {
            std::size_t j = js[k];
            while (q < mb.phi_plus.blk[j]) T = T * mb.phi_plus.Rinv[++q];
            out[k] = Bp * T * A_plus[j];
        }
        T = SmallMat::Identity(n2 / 2, n2 / 2);
        q = mb.phi_minus.blk[i];
        SmallMat Bm = mb.phi_minus.B[i];
        for (std::size_t k = split; k < js.size(); ++k) {
            std::size_t j = js[k];
            while (q < mb.phi_minus.blk[j]) T = T * mb.phi_minus.Rinv[++q];
            SmallMat lower = -(Bm * T * A_minus[j]);
            out[k] = j == i ? SmallMat(0.5 * (out[k] + lower)) : lower;
        }
    }
    /// Block evaluated with the four case formulas in M+-, d+-; x_i and y_j must not both lie right of 0.
    [[nodiscard]] SmallMat block_progreen(std::size_t i, std::size_t j) const {
        const ModeBasis& mb = *modes;
        const std::size_t o = mb.i0;
        if (j <= o && i >= o && i > j) return mb.phi_plus_at(i) * M_plus * mb.psi_tilde_minus_at(j);
        if (i <= o && j >= o && i < j) return -(mb.phi_minus_at(i) * M_minus * mb.psi_tilde_plus_at(j));
        if (j <= o && i <= o && j < i)
            return mb.phi_minus_at(i) * d_plus * mb.psi_tilde_minus_at(j) + mb.psi_minus_at(i) * mb.psi_tilde_minus_at(j);
        if (i <= o && j <= o && i < j)
            return mb.phi_minus_at(i) * d_minus * mb.psi_tilde_minus_at(j) - mb.phi_minus_at(i) * mb.phi_tilde_minus_at(j);
        fail(ErrorKind::invalid_argument, "no case formula for this (x, y) ordering");
    }
};

inline ResolventAssembly assemble_resolvent(ModeBasis mb_in) {
    ResolventAssembly ra;
    auto mb = std::make_shared<ModeBasis>(std::move(mb_in));
    const int n = mb->n, n2 = 2 * n;
    const SmallMat& S = mb->S;
    ra.M_plus = (mb->Psi_tilde_minus0 * S * mb->Phi_plus0).inverse();
    ra.M_minus = (mb->Psi_tilde_plus0 * S * mb->Phi_minus0).inverse();
    SmallMat F(n2, n2);
    F << mb->Phi_plus0, mb->Phi_minus0;
    SmallMat coeffs = F.partialPivLu().solve(mb->Psi_minus0);
    ra.M_plus_kramer = coeffs.topRows(n);
    ra.d_plus = -coeffs.bottomRows(n);
    SmallMat Rows(n2, n2);
    Rows << mb->Psi_tilde_minus0, mb->Psi_tilde_plus0;
    SmallMat Rinv = Rows.inverse();
    ra.M_minus_alt = mb->Phi_tilde_minus0 * Rinv.rightCols(n);
    ra.d_minus = mb->Phi_tilde_minus0 * Rinv.leftCols(n);
    ra.d_minus_derived = -ra.M_minus * (mb->Psi_tilde_plus0 * S * mb->Psi_minus0);
    ra.kramer_deviation = (ra.M_plus - ra.M_plus_kramer).cwiseAbs().maxCoeff() /
                          std::max(1.0, ra.M_plus.cwiseAbs().maxCoeff());

    const std::size_t N = mb->grid.N;
    ra.A_plus.resize(N);
    ra.A_minus.resize(N);
    for (std::size_t j = 0; j < N; ++j) {
        SmallMat Zm = mb->psi_tilde_minus.B[j].transpose();
        SmallMat Zp = mb->psi_tilde_plus.B[j].transpose();
        ra.A_plus[j] = (Zm * S * mb->phi_plus.B[j]).inverse() * Zm;
        ra.A_minus[j] = (Zp * S * mb->phi_minus.B[j]).inverse() * Zp;
    }
    ra.modes = std::move(mb);
    return ra;
}

inline JumpResiduals jump_residuals(const ResolventAssembly& ra, std::size_t j) {
    const int n = ra.n();
    SmallMat J = ra.block(j, j, true) - ra.block(j, j, false);
    SmallMat I = SmallMat::Identity(n, n);
    JumpResiduals r;
    r.G = J.topLeftCorner(n, n).cwiseAbs().maxCoeff();
    r.G_y = (J.topRightCorner(n, n) + I).cwiseAbs().maxCoeff();
    r.G_x = (J.bottomLeftCorner(n, n) - I).cwiseAbs().maxCoeff();
    r.G_xy = J.bottomRightCorner(n, n).cwiseAbs().maxCoeff();
    return r;
}

/// Z S W along x for the pair (Psi_tilde^-, Phi^+), relative drift from its value at the matching node
/// over nodes with |x| <= reach.
inline double conservation_drift(const ResolventAssembly& ra, double reach = 10.0) {
    const ModeBasis& mb = *ra.modes;
    SmallMat ref = mb.psi_tilde_minus_at(mb.i0) * mb.S * mb.phi_plus_at(mb.i0);
    double scale = ref.cwiseAbs().maxCoeff(), worst = 0;
    for (std::size_t i = 0; i < mb.grid.N; i += 7) {
        if (std::abs(mb.grid.x(i)) > reach) continue;
        SmallMat v = mb.psi_tilde_minus_at(i) * mb.S * mb.phi_plus_at(i);
        worst = std::max(worst, (v - ref).cwiseAbs().maxCoeff() / scale);
    }
    return worst;
}

/// Direct oracle: (L_h - lambda) g = e_j / h for each component of the delta.
struct DirectResolvent {
    std::size_t j = 0;
    int n = 1;
    std::vector<cd> g;  ///< g[(i * n + a) * n + b] = G_ab(x_i, y_j)
    [[nodiscard]] cd at(std::size_t i, int a = 0, int b = 0) const { return g[(i * n + a) * n + b]; }
};

class DirectResolventSolver {
public:
    DirectResolventSolver(const LinearOperator& op, cd lambda) : n_(op.n), N_(op.grid.N), h_(op.grid.h()), lu_(shifted(op, lambda)) {}

    [[nodiscard]] DirectResolvent solve(std::size_t j, double amplitude = 1.0) const {
        require(j < N_, ErrorKind::invalid_argument, "delta node outside the grid");
        DirectResolvent out;
        out.j = j;
        out.n = n_;
        out.g.assign(N_ * n_ * n_, cd(0));
        for (int b = 0; b < n_; ++b) {
            std::vector<cd> rhs(N_ * n_, cd(0));
            rhs[j * n_ + b] = amplitude / h_;
            auto sol = lu_.solve(std::move(rhs));
            for (std::size_t i = 0; i < N_; ++i)
                for (int a = 0; a < n_; ++a) out.g[(i * n_ + a) * n_ + b] = sol[i * n_ + a];
        }
        return out;
    }

private:
    static BandedLU<cd> shifted(const LinearOperator& op, cd lambda) {
        BandMatrix<cd> a = op.matrix.cast<cd>();
        for (std::size_t i = 0; i < a.size(); ++i) a(i, i) -= lambda;
        return BandedLU<cd>(std::move(a));
    }
    int n_;
    std::size_t N_;
    double h_;
    BandedLU<cd> lu_;
};

inline DirectResolvent resolvent_direct(const LinearOperator& op, cd lambda, std::size_t j, double amplitude = 1.0) {
    return DirectResolventSolver(op, lambda).solve(j, amplitude);
}

/// G_tilde = G_lambda + u_bar'(x) psi_tilde(y) / lambda (the rank-one pole part removed).
/// Indices refer to the mode grid; profile arrays are sampled with the mode stride.
inline SmallMat tilde_G(const ResolventAssembly& ra, const FrontProfile& p, const std::vector<double>& psi_tilde,
                        std::size_t i, std::size_t j, std::size_t stride = 1) {
    const int n = ra.n();
    SmallMat g = ra.G(i, j);
    for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
            g(a, b) += p.u_bar_prime[i * stride * n + a] * psi_tilde[j * stride * n + b] / ra.lambda();
    return g;
}

struct ResolventBound {
    double C = 0.0;                ///< sup |G_tilde| e^{eta'(|x|+|y|)} over opposite-side samples
    double eta_prime = 0.0;
    cd lambda_at_max;
    double x_at_max = 0.0, y_at_max = 0.0;
    double measured_tail_rate = 0.0;  ///< min over lambda of the fitted rate of |G_tilde(x,-x)| in |x|+|y|
    double expected_tail_rate = 0.0;  ///< min over lambda of min_j Re sqrt(lambda - sigma_j)
    bool pass = false;
};

/// Fits C in |G_tilde_lambda(x,y)| <= C e^{-eta'(|x|+|y|)} over y <= 0 <= x and x <= 0 <= y with |x|,|y| <= reach,
/// and checks the tail rate along y = -x beyond the front core.
inline ResolventBound verify_resolvent_bound(const std::vector<ResolventAssembly>& set, const FrontProfile& p,
                                             const std::vector<double>& psi_tilde, double eta_prime,
                                             double reach = 12.0, double tail_from = 6.0, std::size_t stride = 1) {
    ResolventBound out;
    out.eta_prime = eta_prime;
    out.measured_tail_rate = std::numeric_limits<double>::infinity();
    out.expected_tail_rate = std::numeric_limits<double>::infinity();
    for (const auto& ra : set) {
        const Grid1D& g = ra.grid();
        const std::size_t o = ra.modes->i0;
        for (std::size_t i = 0; i < g.N; ++i) {
            double x = g.x(i);
            if (std::abs(x) > reach) continue;
            for (std::size_t j = 0; j < g.N; j += 5) {
                double y = g.x(j);
                if (std::abs(y) > reach || (i > o && j > o) || (i < o && j < o)) continue;
                double v = tilde_G(ra, p, psi_tilde, i, j, stride).cwiseAbs().maxCoeff();
                double r = v * std::exp(eta_prime * (std::abs(x) + std::abs(y)));
                if (r > out.C) {
                    out.C = r;
                    out.lambda_at_max = ra.lambda();
                    out.x_at_max = x;
                    out.y_at_max = y;
                }
            }
        }
        std::vector<double> s, lv;
        for (std::size_t i = o; i < g.N; ++i) {
            double x = g.x(i);
            if (x < tail_from || x > reach) continue;
            std::size_t j = 2 * o - i;
            double v = tilde_G(ra, p, psi_tilde, i, j, stride).cwiseAbs().maxCoeff();
            if (v <= 0) continue;
            s.push_back(x - g.x(j));
            lv.push_back(std::log(v));
        }
        if (s.size() >= 2) out.measured_tail_rate = std::min(out.measured_tail_rate, -linear_regression(s, lv).slope);
        const ModeData& md = ra.modes->modes;
        for (const SideModes* sm : {&md.plus, &md.minus})
            for (int q = 0; q < ra.n(); ++q) out.expected_tail_rate = std::min(out.expected_tail_rate, -sm->mu[q].real());
    }
    out.pass = std::isfinite(out.C) && out.measured_tail_rate >= 0.9 * out.expected_tail_rate;
    return out;
}

}  // namespace frontstab
