#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "frontstab/error.hpp"

namespace frontstab {

using cd = std::complex<double>;

/// Uniform grid on [x_min, x_max] with N nodes.
struct Grid1D {
    double x_min = -30.0;
    double x_max = 30.0;
    std::size_t N = 3001;

    Grid1D() = default;
    Grid1D(double a, double b, std::size_t n) : x_min(a), x_max(b), N(n) {
        require(n >= 3, ErrorKind::invalid_argument, "grid needs N >= 3");
        require(std::isfinite(a) && std::isfinite(b) && b > a, ErrorKind::invalid_argument,
                "grid needs x_max > x_min");
    }

    [[nodiscard]] double h() const { return (x_max - x_min) / static_cast<double>(N - 1); }
    [[nodiscard]] double x(std::size_t i) const { return x_min + h() * static_cast<double>(i); }
    [[nodiscard]] std::vector<double> nodes() const {
        std::vector<double> out(N);
        for (std::size_t i = 0; i < N; ++i) out[i] = x(i);
        return out;
    }
    /// Index of the node nearest to xv (clamped).
    [[nodiscard]] std::size_t nearest(double xv) const {
        double s = std::round((xv - x_min) / h());
        s = std::clamp(s, 0.0, static_cast<double>(N - 1));
        return static_cast<std::size_t>(s);
    }
};

// ---------------------------------------------------------------------------
// Special functions

/// Normalized cumulative Gaussian (1/sqrt(pi)) * int_{-inf}^x exp(-z^2) dz.
inline double errfn(double x) {
    if (x == std::numeric_limits<double>::infinity()) return 1.0;
    if (x == -std::numeric_limits<double>::infinity()) return 0.0;
    return 0.5 * std::erfc(-x);
}

/// erfc(x) by adaptive Gauss-Kronrod quadrature of its defining integral.
/// Independent of the library erfc; used to validate errfn.
inline double erfc_quadrature(double x) {
    using boost::math::quadrature::gauss_kronrod;
    auto g = [](double z) { return std::exp(-z * z); };
    const double c = 2.0 / std::sqrt(std::numbers::pi);
    if (x >= 0.0) {
        double upper = x + 9.0;
        return c * gauss_kronrod<double, 61>::integrate(g, x, upper, 12, 1e-15);
    }
    return 2.0 - erfc_quadrature(-x);
}

/// errfn computed from the quadrature path.
inline double errfn_quadrature(double x) { return 0.5 * erfc_quadrature(-x); }

/// True when the quadrature value of erfc(x) obeys erfc(x) <= exp(-x^2) + 1e-12.
inline bool erfc_upper_check(double x) {
    require(x >= 0.0 && std::isfinite(x), ErrorKind::invalid_argument, "erfc_upper_check needs x >= 0");
    return erfc_quadrature(x) <= std::exp(-x * x) + 1e-12;
}

struct GaussianKernelSpec {
    double M = 4.0;
};

/// K_M(x,t) = t^{-1/2} exp(-x^2/(M t)).
inline double gaussian_kernel(const GaussianKernelSpec& spec, double x, double t) {
    require(t > 0.0, ErrorKind::invalid_argument, "gaussian_kernel needs t > 0");
    require(spec.M > 0.0, ErrorKind::invalid_argument, "gaussian_kernel needs M > 0");
    return std::exp(-x * x / (spec.M * t)) / std::sqrt(t);
}

/// Heat kernel (4 pi t)^{-1/2} exp(-x^2/(4t)).
inline double heat_kernel(double x, double t) {
    return std::exp(-x * x / (4.0 * t)) / std::sqrt(4.0 * std::numbers::pi * t);
}

/// Quintic smoothstep cutoff: 0 for t <= 1, 1 for t >= 2.
inline double cutoff_chi(double t) {
    if (t <= 1.0) return 0.0;
    if (t >= 2.0) return 1.0;
    double s = t - 1.0;
    return s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
}

inline double cutoff_chi_prime(double t) {
    if (t <= 1.0 || t >= 2.0) return 0.0;
    double s = t - 1.0;
    return 30.0 * s * s * (1.0 - s) * (1.0 - s);
}

inline double cutoff_chi_second(double t) {
    if (t <= 1.0 || t >= 2.0) return 0.0;
    double s = t - 1.0;
    return 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s);
}

// ---------------------------------------------------------------------------
// Quadrature and norms

/// Trapezoid integral of uniformly spaced samples.
inline double trapezoid(std::span<const double> v, double h) {
    if (v.size() < 2) return 0.0;
    double s = 0.5 * (v.front() + v.back());
    for (std::size_t i = 1; i + 1 < v.size(); ++i) s += v[i];
    return s * h;
}

inline double trapezoid_weight(std::size_t i, std::size_t n, double h) {
    return (i == 0 || i + 1 == n) ? 0.5 * h : h;
}

/// Trapezoid-weighted discrete L^p norm; p = inf gives max |v|.
inline double discrete_lp_norm(std::span<const double> v, double h, double p) {
    require(p >= 1.0, ErrorKind::invalid_argument, "discrete_lp_norm needs p >= 1");
    if (std::isinf(p)) {
        double m = 0.0;
        for (double x : v) m = std::max(m, std::abs(x));
        return m;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i)
        s += trapezoid_weight(i, v.size(), h) * std::pow(std::abs(v[i]), p);
    return std::pow(s, 1.0 / p);
}

/// Gauss-Legendre rule with 16 points on [-1, 1].
struct GaussLegendre16 {
    std::vector<double> nodes;
    std::vector<double> weights;
    GaussLegendre16() {
        using G = boost::math::quadrature::gauss<double, 16>;
        const auto& a = G::abscissa();
        const auto& w = G::weights();
        for (std::size_t i = 0; i < a.size(); ++i) {
            nodes.push_back(a[i]);
            weights.push_back(w[i]);
            if (a[i] != 0.0) {
                nodes.push_back(-a[i]);
                weights.push_back(w[i]);
            }
        }
        std::vector<std::size_t> idx(nodes.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](auto l, auto r) { return nodes[l] < nodes[r]; });
        std::vector<double> n2, w2;
        for (auto i : idx) {
            n2.push_back(nodes[i]);
            w2.push_back(weights[i]);
        }
        nodes = std::move(n2);
        weights = std::move(w2);
    }
    static const GaussLegendre16& get() {
        static const GaussLegendre16 rule;
        return rule;
    }
};

// ---------------------------------------------------------------------------
// Regression helpers

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

inline LinearFit linear_regression(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorKind::invalid_argument,
            "linear_regression needs matching samples");
    double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    LinearFit f;
    f.slope = sxx > 0 ? sxy / sxx : 0.0;
    f.intercept = my - f.slope * mx;
    f.r2 = (sxx > 0 && syy > 0) ? (sxy * sxy) / (sxx * syy) : 1.0;
    return f;
}

/// Exponential decay rate r from log-linear regression of |v| ~ C e^{-r t}.
inline double decay_rate(std::span<const double> t, std::span<const double> v) {
    std::vector<double> tt, lv;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (std::abs(v[i]) > 0.0 && std::isfinite(v[i])) {
            tt.push_back(t[i]);
            lv.push_back(std::log(std::abs(v[i])));
        }
    }
    if (tt.size() < 2) return std::numeric_limits<double>::infinity();
    return -linear_regression(tt, lv).slope;
}

// ---------------------------------------------------------------------------
// Interpolation and differentiation on uniform grids

/// Cubic Hermite interpolation of (f, f') samples on a uniform grid.
/// Outside the grid the end values are held constant.
inline double hermite_eval(const Grid1D& g, std::span<const double> f, std::span<const double> fp, double x,
                           double* deriv = nullptr) {
    const double h = g.h();
    double s = (x - g.x_min) / h;
    if (s <= 0.0) {
        if (deriv) *deriv = 0.0;
        return f.front();
    }
    if (s >= static_cast<double>(g.N - 1)) {
        if (deriv) *deriv = 0.0;
        return f.back();
    }
    auto i = static_cast<std::size_t>(s);
    if (i >= g.N - 1) i = g.N - 2;
    double u = s - static_cast<double>(i);
    double u2 = u * u, u3 = u2 * u;
    double h00 = 2 * u3 - 3 * u2 + 1, h10 = u3 - 2 * u2 + u, h01 = -2 * u3 + 3 * u2, h11 = u3 - u2;
    if (deriv) {
        double d00 = 6 * u2 - 6 * u, d10 = 3 * u2 - 4 * u + 1, d01 = -6 * u2 + 6 * u, d11 = 3 * u2 - 2 * u;
        *deriv = (d00 * f[i] + d01 * f[i + 1]) / h + d10 * fp[i] + d11 * fp[i + 1];
    }
    return h00 * f[i] + h10 * h * fp[i] + h01 * f[i + 1] + h11 * h * fp[i + 1];
}

/// First derivative: fourth-order centered in the interior, second-order one-sided at the ends.
inline std::vector<double> derivative4(std::span<const double> f, double h) {
    const std::size_t n = f.size();
    std::vector<double> d(n, 0.0);
    if (n < 5) {
        for (std::size_t i = 1; i + 1 < n; ++i) d[i] = (f[i + 1] - f[i - 1]) / (2 * h);
        if (n >= 3) {
            d[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h);
            d[n - 1] = (3 * f[n - 1] - 4 * f[n - 2] + f[n - 3]) / (2 * h);
        }
        return d;
    }
    for (std::size_t i = 2; i + 2 < n; ++i)
        d[i] = (f[i - 2] - 8 * f[i - 1] + 8 * f[i + 1] - f[i + 2]) / (12 * h);
    d[1] = (f[2] - f[0]) / (2 * h);
    d[n - 2] = (f[n - 1] - f[n - 3]) / (2 * h);
    d[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h);
    d[n - 1] = (3 * f[n - 1] - 4 * f[n - 2] + f[n - 3]) / (2 * h);
    return d;
}

/// Second derivative by the centered three-point stencil, one-sided at the ends.
inline std::vector<double> derivative2(std::span<const double> f, double h) {
    const std::size_t n = f.size();
    std::vector<double> d(n, 0.0);
    for (std::size_t i = 1; i + 1 < n; ++i) d[i] = (f[i + 1] - 2 * f[i] + f[i - 1]) / (h * h);
    if (n >= 4) {
        d[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / (h * h);
        d[n - 1] = (2 * f[n - 1] - 5 * f[n - 2] + 4 * f[n - 3] - f[n - 4]) / (h * h);
    }
    return d;
}

// ---------------------------------------------------------------------------
// Banded matrices

/// Square banded matrix with kl sub- and ku super-diagonals.
/// Row-wise storage keeps kl extra superdiagonals for pivoting fill.
template <class T>
class BandMatrix {
public:
    BandMatrix() = default;
    BandMatrix(std::size_t n, std::size_t kl, std::size_t ku)
        : n_(n), kl_(kl), ku_(ku), width_(2 * kl + ku + 1), a_(n * (2 * kl + ku + 1), T{}) {}

    [[nodiscard]] std::size_t size() const { return n_; }
    [[nodiscard]] std::size_t kl() const { return kl_; }
    [[nodiscard]] std::size_t ku() const { return ku_; }

    [[nodiscard]] bool in_band(std::size_t i, std::size_t j) const {
        return j + kl_ >= i && j <= i + ku_ + kl_;
    }
    T& operator()(std::size_t i, std::size_t j) { return a_[i * width_ + (j + kl_ - i)]; }
    const T& operator()(std::size_t i, std::size_t j) const { return a_[i * width_ + (j + kl_ - i)]; }
    [[nodiscard]] T get(std::size_t i, std::size_t j) const { return in_band(i, j) ? (*this)(i, j) : T{}; }

    [[nodiscard]] std::vector<T> apply(std::span<const T> x) const {
        std::vector<T> y(n_, T{});
        for (std::size_t i = 0; i < n_; ++i) {
            std::size_t j0 = i >= kl_ ? i - kl_ : 0;
            std::size_t j1 = std::min(n_ - 1, i + ku_);
            T s{};
            for (std::size_t j = j0; j <= j1; ++j) s += (*this)(i, j) * x[j];
            y[i] = s;
        }
        return y;
    }

    template <class U>
    [[nodiscard]] BandMatrix<U> cast() const {
        BandMatrix<U> out(n_, kl_, ku_);
        for (std::size_t i = 0; i < n_; ++i) {
            std::size_t j0 = i >= kl_ ? i - kl_ : 0;
            std::size_t j1 = std::min(n_ - 1, i + ku_);
            for (std::size_t j = j0; j <= j1; ++j) out(i, j) = U((*this)(i, j));
        }
        return out;
    }

private:
    std::size_t n_ = 0, kl_ = 0, ku_ = 0, width_ = 0;
    std::vector<T> a_;
};

/// LU factorization with partial pivoting of a banded matrix.
template <class T>
class BandedLU {
public:
    explicit BandedLU(BandMatrix<T> a) : lu_(std::move(a)), piv_(lu_.size()) {
        const std::size_t n = lu_.size(), kl = lu_.kl(), ku = lu_.ku();
        double scale = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = (i >= kl ? i - kl : 0); j <= std::min(n - 1, i + ku); ++j)
                scale = std::max(scale, std::abs(lu_(i, j)));
        for (std::size_t k = 0; k < n; ++k) {
            std::size_t last = std::min(n - 1, k + kl);
            std::size_t p = k;
            double best = std::abs(lu_(k, k));
            for (std::size_t i = k + 1; i <= last; ++i)
                if (std::abs(lu_(i, k)) > best) {
                    best = std::abs(lu_(i, k));
                    p = i;
                }
            piv_[k] = p;
            if (!(best > 1e-300) || best <= scale * 1e-15)
                fail(ErrorKind::singular_system, "banded matrix is numerically singular");
            std::size_t jmax = std::min(n - 1, k + ku + kl);
            if (p != k)
                for (std::size_t j = k; j <= jmax; ++j) std::swap(lu_(k, j), lu_(p, j));
            T inv = T(1) / lu_(k, k);
            for (std::size_t i = k + 1; i <= last; ++i) {
                T m = lu_(i, k) * inv;
                lu_(i, k) = m;
                if (m == T{}) continue;
                for (std::size_t j = k + 1; j <= jmax; ++j) lu_(i, j) -= m * lu_(k, j);
            }
        }
    }

    [[nodiscard]] std::vector<T> solve(std::vector<T> b) const {
        const std::size_t n = lu_.size(), kl = lu_.kl(), ku = lu_.ku();
        for (std::size_t k = 0; k < n; ++k) {
            if (piv_[k] != k) std::swap(b[k], b[piv_[k]]);
            std::size_t last = std::min(n - 1, k + kl);
            for (std::size_t i = k + 1; i <= last; ++i) b[i] -= lu_(i, k) * b[k];
        }
        for (std::size_t k = n; k-- > 0;) {
            std::size_t jmax = std::min(n - 1, k + ku + kl);
            T s = b[k];
            for (std::size_t j = k + 1; j <= jmax; ++j) s -= lu_(k, j) * b[j];
            b[k] = s / lu_(k, k);
        }
        return b;
    }

private:
    BandMatrix<T> lu_;
    std::vector<std::size_t> piv_;
};

/// Coefficients of the centered second-difference stencil at offsets -2..2 (times 1/h^2).
/// order 2: (1,-2,1); order 4: (-1,16,-30,16,-1)/12.
inline std::array<double, 5> laplacian_stencil(int order) {
    if (order == 2) return {0.0, 1.0, -2.0, 1.0, 0.0};
    if (order == 4) return {-1.0 / 12, 16.0 / 12, -30.0 / 12, 16.0 / 12, -1.0 / 12};
    fail(ErrorKind::invalid_argument, "stencil order must be 2 or 4");
}

/// Second-difference operator on all N nodes of the grid for an n-component field
/// (node-major ordering), with homogeneous Dirichlet ghost closure.
/// The default is the standard (1,-2,1)/h^2 stencil; order 4 uses the five-point stencil.
inline BandMatrix<double> second_difference_operator(const Grid1D& g, std::size_t n = 1, int order = 2) {
    const std::size_t N = g.N;
    const double ih2 = 1.0 / (g.h() * g.h());
    const auto c = laplacian_stencil(order);
    const std::size_t reach = order == 2 ? 1 : 2;
    BandMatrix<double> a(n * N, n * reach, n * reach);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t comp = 0; comp < n; ++comp) {
            std::size_t r = i * n + comp;
            for (int k = -static_cast<int>(reach); k <= static_cast<int>(reach); ++k) {
                long j = static_cast<long>(i) + k;
                if (j < 0 || j >= static_cast<long>(N)) continue;
                a(r, static_cast<std::size_t>(j) * n + comp) = c[k + 2] * ih2;
            }
        }
    return a;
}

}  // namespace frontstab
