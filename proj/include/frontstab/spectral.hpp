#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "frontstab/error.hpp"
#include "frontstab/model.hpp"
#include "frontstab/numerics.hpp"
#include "frontstab/profile.hpp"

extern "C" {
void dsbtrd_(const char* vect, const char* uplo, const int* n, const int* kd, double* ab, const int* ldab, double* d,
             double* e, double* q, const int* ldq, double* work, int* info, std::size_t vect_len, std::size_t uplo_len);
void dstevr_(const char* jobz, const char* range, const int* n, double* d, double* e, const double* vl,
             const double* vu, const int* il, const int* iu, const double* abstol, int* m, double* w, double* z,
             const int* ldz, int* isuppz, double* work, const int* lwork, int* iwork, const int* liwork, int* info,
             std::size_t jobz_len, std::size_t range_len);
}

namespace frontstab {

/// Discretized L = d_xx + Df(u_bar) on the profile grid (node-major, Dirichlet ghost closure).
struct LinearOperator {
    BandMatrix<double> matrix;
    int n = 1;
    Grid1D grid;
    bool symmetric = false;
};

struct SpectralData {
    Eigen::VectorXcd eigenvalues;  ///< sorted by real part, descending
    cd zero_eig;
    int zero_index = 0;
    std::vector<double> phi;        ///< right zero mode, equal to the sampled u_bar'
    std::vector<double> psi_tilde;  ///< adjoint zero mode, <psi_tilde, u_bar'> = 1
    double eta = 0.0;
    double eta_prime = 0.0;
    double eta0 = 0.0;
    double lambda1 = -std::numeric_limits<double>::infinity();  ///< largest non-zero discrete eigenvalue (real part)
    double essential_edge = 0.0;                                 ///< max Re sigma over both end states
    double cosine_similarity = 0.0;
    double biorthogonality = 0.0;  ///< max_k |<psi_tilde, w_k>| over unit eigenvectors with k != zero
    std::vector<double> participation;  ///< outer-half participation ratio per eigenvalue
    std::vector<bool> discrete;         ///< localized (not a continuum approximant)
};

struct SpectralOptions {
    double tol = 1e-6;
    double eta0_factor = 0.9;
    double cluster_tol = 1e-3;  ///< eigenvalues within this of zero count toward the zero cluster
};

/// Assembles L on the profile grid with the profile's stencil.
inline LinearOperator assemble_linearization(const ReactionSystem& sys, const FrontProfile& p) {
    const int n = p.n;
    require(sys.n == n, ErrorKind::invalid_argument, "system and profile dimensions differ");
    LinearOperator op;
    op.n = n;
    op.grid = p.grid;
    op.matrix = second_difference_operator(p.grid, n, p.stencil_order);
    std::vector<double> J(n * n);
    bool sym = true;
    for (std::size_t i = 0; i < p.grid.N; ++i) {
        eval_jacobian_into(sys, std::span<const double>(p.u_bar).subspan(i * n, n), J);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b) {
                op.matrix(i * n + a, i * n + b) += J[a + b * n];
                if (a != b && std::abs(J[a + b * n] - J[b + a * n]) > 1e-14) sym = false;
            }
    }
    op.symmetric = sym;
    return op;
}

namespace detail {

/// Weighted inner product (trapezoid in x) of node-major fields.
inline double inner(const std::vector<double>& a, const std::vector<double>& b, const Grid1D& g, int n) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.N; ++i) {
        double w = trapezoid_weight(i, g.N, g.h());
        for (int c = 0; c < n; ++c) s += w * a[i * n + c] * b[i * n + c];
    }
    return s;
}

inline double outer_participation(const Eigen::VectorXd& w, const Grid1D& g, int n) {
    double tot = 0.0, out = 0.0;
    const double half = 0.5 * std::max(std::abs(g.x_min), std::abs(g.x_max));
    for (std::size_t i = 0; i < g.N; ++i)
        for (int c = 0; c < n; ++c) {
            double v = w[static_cast<Eigen::Index>(i * n + c)];
            tot += v * v;
            if (std::abs(g.x(i)) > half) out += v * v;
        }
    return tot > 0 ? out / tot : 0.0;
}

/// Symmetric banded eigensolve: reduction to tridiagonal form, then MRRR.
/// Eigenvalues ascending, eigenvectors in the columns of z.
inline void symmetric_band_eig(const BandMatrix<double>& a, Eigen::VectorXd& w, Eigen::MatrixXd& z) {
    const int N = static_cast<int>(a.size());
    const int kd = static_cast<int>(std::max(a.kl(), a.ku()));
    const int ldab = kd + 1;
    std::vector<double> ab(static_cast<std::size_t>(ldab) * N, 0.0);
    for (int j = 0; j < N; ++j)
        for (int i = std::max(0, j - kd); i <= j; ++i)
            ab[static_cast<std::size_t>(kd + i - j) + static_cast<std::size_t>(j) * ldab] = a.get(i, j);
    std::vector<double> d(N), e(N), work(N);
    Eigen::MatrixXd q(N, N);
    int info = 0;
    dsbtrd_("V", "U", &N, &kd, ab.data(), &ldab, d.data(), e.data(), q.data(), &N, work.data(), &info, 1, 1);
    if (info != 0) fail(ErrorKind::resolution_insufficient, "band reduction failed");
    Eigen::MatrixXd zt(N, N);
    w.resize(N);
    std::vector<int> isuppz(2 * static_cast<std::size_t>(N));
    int m = 0, lwork = 20 * N, liwork = 10 * N, il = 0, iu = 0;
    double vl = 0, vu = 0, abstol = 0;
    std::vector<double> wk(static_cast<std::size_t>(lwork));
    std::vector<int> iwk(static_cast<std::size_t>(liwork));
    dstevr_("V", "A", &N, d.data(), e.data(), &vl, &vu, &il, &iu, &abstol, &m, w.data(), zt.data(), &N,
            isuppz.data(), wk.data(), &lwork, iwk.data(), &liwork, &info, 1, 1);
    if (info != 0 || m != N) fail(ErrorKind::resolution_insufficient, "tridiagonal eigensolve failed");
    z.noalias() = q * zt;
}

}  // namespace detail

/// Zero eigenfunction of the transposed operator by shifted inverse iteration,
/// normalized so that <psi_tilde, u_bar'> = 1.
inline std::vector<double> adjoint_zero_mode(const LinearOperator& op, const FrontProfile& p, double zero_eig = 0.0) {
    const std::size_t M = op.matrix.size();
    BandMatrix<double> t(M, op.matrix.ku(), op.matrix.kl());
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = (i >= op.matrix.kl() ? i - op.matrix.kl() : 0); j <= std::min(M - 1, i + op.matrix.ku()); ++j)
            t(j, i) = op.matrix(i, j);
    const double shift = zero_eig + 1e-6;
    for (std::size_t i = 0; i < M; ++i) t(i, i) -= shift;
    BandedLU<double> lu(t);
    std::vector<double> v = p.u_bar_prime;
    for (int it = 0; it < 6; ++it) {
        v = lu.solve(v);
        double nv = 0;
        for (double x : v) nv = std::max(nv, std::abs(x));
        for (double& x : v) x /= nv;
    }
    double ip = detail::inner(v, p.u_bar_prime, p.grid, p.n);
    double nv = std::sqrt(detail::inner(v, v, p.grid, p.n)), nu = std::sqrt(detail::inner(p.u_bar_prime, p.u_bar_prime, p.grid, p.n));
    if (std::abs(ip) < 1e-8 * nv * nu) fail(ErrorKind::normalization_degenerate, "<psi_tilde, u_bar'> vanishes");
    for (double& x : v) x /= ip;
    return v;
}

/// Eigen-decomposition of L, zero-mode identification, gap and working rate.
inline SpectralData check_spectral_assumption(const LinearOperator& op, const FrontProfile& p,
                                              const EndStateSpectrum& ends, const SpectralOptions& opt = {}) {
    require(opt.eta0_factor > 0 && opt.eta0_factor < 1, ErrorKind::invalid_argument, "eta0_factor must lie in (0,1)");
    const int n = op.n;
    const Grid1D& g = op.grid;
    const std::size_t M = op.matrix.size();
    SpectralData sd;
    std::vector<Eigen::VectorXd> vecs;  // real parts of right eigenvectors, same order as eigenvalues
    Eigen::VectorXcd ev(M);
    if (op.symmetric) {
        Eigen::VectorXd w;
        Eigen::MatrixXd z;
        detail::symmetric_band_eig(op.matrix, w, z);
        for (std::size_t k = 0; k < M; ++k) ev[static_cast<Eigen::Index>(k)] = w[static_cast<Eigen::Index>(M - 1 - k)];
        vecs.reserve(M);
        for (std::size_t k = 0; k < M; ++k) vecs.push_back(z.col(static_cast<Eigen::Index>(M - 1 - k)));
    } else {
        Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(M, M);
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t j = (i >= op.matrix.kl() ? i - op.matrix.kl() : 0); j <= std::min(M - 1, i + op.matrix.ku()); ++j)
                dense(i, j) = op.matrix(i, j);
        Eigen::EigenSolver<Eigen::MatrixXd> es(dense, true);
        if (es.info() != Eigen::Success) fail(ErrorKind::resolution_insufficient, "dense eigensolve failed");
        Eigen::VectorXcd w = es.eigenvalues();
        std::vector<std::size_t> idx(M);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](auto a, auto b) {
            if (w[a].real() != w[b].real()) return w[a].real() > w[b].real();
            return w[a].imag() > w[b].imag();
        });
        Eigen::MatrixXcd V = es.eigenvectors();
        for (std::size_t k = 0; k < M; ++k) {
            ev[static_cast<Eigen::Index>(k)] = w[idx[k]];
            Eigen::VectorXcd c = V.col(static_cast<Eigen::Index>(idx[k]));
            // rotate to make the dominant entry real before taking the real part
            Eigen::Index im;
            c.cwiseAbs().maxCoeff(&im);
            c *= std::conj(c[im]) / std::abs(c[im]);
            vecs.push_back(c.real());
        }
    }
    sd.eigenvalues = ev;
    // zero eigenvalue: nearest to 0
    Eigen::Index iz = 0;
    ev.cwiseAbs().minCoeff(&iz);
    sd.zero_index = static_cast<int>(iz);
    sd.zero_eig = ev[iz];
    sd.eta_prime = ends.eta_prime;
    sd.essential_edge = -std::numeric_limits<double>::infinity();
    for (const Eigen::VectorXcd* s : {&ends.sigma_plus, &ends.sigma_minus})
        for (int j = 0; j < s->size(); ++j) sd.essential_edge = std::max(sd.essential_edge, (*s)[j].real());

    for (Eigen::Index k = 0; k < ev.size(); ++k) {
        if (k == iz) continue;
        if (ev[k].real() >= 0.0) fail(ErrorKind::assumption_violated, "L has an eigenvalue with Re >= 0 besides the zero mode");
        if (std::abs(ev[k]) < opt.cluster_tol)
            fail(ErrorKind::assumption_violated, "zero eigenvalue is not simple");
    }
    if (std::abs(sd.zero_eig) > opt.tol)
        fail(ErrorKind::resolution_insufficient, "no eigenvalue within tolerance of zero");

    sd.participation.resize(M);
    sd.discrete.resize(M);
    for (std::size_t k = 0; k < M; ++k) {
        sd.participation[k] = detail::outer_participation(vecs[k], g, n);
        sd.discrete[k] = sd.participation[k] <= 0.5;
    }
    for (std::size_t k = 0; k < M; ++k) {
        if (static_cast<Eigen::Index>(k) == iz || !sd.discrete[k]) continue;
        // continuum approximants below the essential edge are never counted as discrete
        sd.lambda1 = std::max(sd.lambda1, ev[static_cast<Eigen::Index>(k)].real());
    }
    sd.eta = std::min(-sd.lambda1, -sd.essential_edge);
    if (!(sd.eta > 0)) fail(ErrorKind::assumption_violated, "spectral gap is not positive");
    sd.eta0 = opt.eta0_factor * std::min(sd.eta / 4.0, sd.eta_prime);

    // zero mode: aligned with u_bar'
    std::vector<double> w0(vecs[static_cast<std::size_t>(iz)].data(), vecs[static_cast<std::size_t>(iz)].data() + M);
    double c01 = detail::inner(w0, p.u_bar_prime, g, n);
    double n0 = std::sqrt(detail::inner(w0, w0, g, n)), nu = std::sqrt(detail::inner(p.u_bar_prime, p.u_bar_prime, g, n));
    sd.cosine_similarity = std::abs(c01) / (n0 * nu);
    sd.phi = p.u_bar_prime;
    sd.psi_tilde = adjoint_zero_mode(op, p, sd.zero_eig.real());

    double worst = 0.0;
    for (std::size_t k = 0; k < M; ++k) {
        if (static_cast<Eigen::Index>(k) == iz) continue;
        std::vector<double> wk(vecs[k].data(), vecs[k].data() + M);
        double nk = std::sqrt(detail::inner(wk, wk, g, n));
        if (nk == 0) continue;
        worst = std::max(worst, std::abs(detail::inner(sd.psi_tilde, wk, g, n)) / nk);
    }
    sd.biorthogonality = worst;
    return sd;
}

/// Spatial exponents at one end state: mu_j = -sqrt(lambda - sigma_j) (decaying, j < n) and
/// mu_{n+j} = +sqrt(lambda - sigma_j) (growing), from w'' = (lambda - sigma) w.
struct SideModes {
    Eigen::VectorXcd mu;   ///< 2n exponents, decaying first
    Eigen::MatrixXcd V;    ///< 2n x 2n, column k = (r_j, mu_k r_j)
    Eigen::MatrixXcd Vt;   ///< 2n x 2n, row k = (l_j, nu l_j) with adjoint exponent nu = -mu_k
    Eigen::VectorXcd gamma, a, b;  ///< small-lambda expansion mu_j = -gamma_j - a_j lambda - b_j lambda^2 + ...
};

struct ModeData {
    cd lambda;
    SideModes plus, minus;
};

namespace detail {

inline SideModes side_modes(const Eigen::VectorXcd& sigma, const Eigen::MatrixXcd& right, const Eigen::MatrixXcd& left,
                            cd lambda) {
    const int n = static_cast<int>(sigma.size());
    SideModes s;
    s.mu.resize(2 * n);
    s.V = Eigen::MatrixXcd::Zero(2 * n, 2 * n);
    s.Vt = Eigen::MatrixXcd::Zero(2 * n, 2 * n);
    s.gamma.resize(n);
    s.a.resize(n);
    s.b.resize(n);
    for (int j = 0; j < n; ++j) {
        cd rad = lambda - sigma[j];
        if (std::abs(rad) <= 1e-14 * std::max(1.0, std::abs(sigma[j])))
            fail(ErrorKind::branch_degenerate, "lambda coincides with an end-state eigenvalue (zero radicand)");
        cd r = std::sqrt(rad);
        if (r.real() <= 1e-12)
            fail(ErrorKind::branch_degenerate, "lambda lies on the essential spectrum; exponents are not split");
        s.mu[j] = -r;
        s.mu[n + j] = r;
        s.gamma[j] = std::sqrt(-sigma[j]);
        s.a[j] = 1.0 / (2.0 * s.gamma[j]);
        s.b[j] = -1.0 / (8.0 * s.gamma[j] * s.gamma[j] * s.gamma[j]);
        for (int k : {j, n + j}) {
            s.V.block(0, k, n, 1) = right.col(j);
            s.V.block(n, k, n, 1) = s.mu[k] * right.col(j);
            // adjoint row solution z = l e^{nu x}, nu = -mu_k, so that Z S W is x-independent
            s.Vt.block(k, 0, 1, n) = left.row(j);
            s.Vt.block(k, n, 1, n) = -s.mu[k] * left.row(j);
        }
    }
    return s;
}

}  // namespace detail

inline ModeData decay_exponents(const EndStateSpectrum& spec, cd lambda) {
    ModeData m;
    m.lambda = lambda;
    m.plus = detail::side_modes(spec.sigma_plus, spec.right_plus, spec.left_plus, lambda);
    m.minus = detail::side_modes(spec.sigma_minus, spec.right_minus, spec.left_minus, lambda);
    return m;
}

}  // namespace frontstab
