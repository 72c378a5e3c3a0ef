#pragma once

// Dense helpers templated on the scalar type: one-sided Jacobi SVD, the
// Moore-Penrose pseudo-inverse built on it, and a unitary radix-2 2-D FFT.

#include "flexdit/common.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

namespace flexdit {

template <typename Scalar>
struct Svd {
    MatrixX<Scalar> u;  // [m, k] with orthonormal columns (for nonzero sigma)
    VectorX<Scalar> sigma;  // [k], descending
    MatrixX<Scalar> v;  // [n, k]
};

struct JacobiOptions {
    int max_sweeps = 100;
    double tolerance = 1e-12;
};

namespace detail {

// Hestenes one-sided Jacobi on a tall matrix (rows >= cols).
template <typename Scalar>
Svd<Scalar> jacobi_svd_tall(MatrixX<Scalar> work, const JacobiOptions& opts) {
    using std::abs;
    using std::sqrt;
    const Index n = work.cols();
    MatrixX<Scalar> v = MatrixX<Scalar>::Identity(n, n);
    bool converged = n < 2;
    // Columns this small are numerically zero; rotating them only chases noise.
    const Scalar eps = std::numeric_limits<Scalar>::epsilon();
    const Scalar tiny = work.squaredNorm() * eps * eps;
    for (int sweep = 0; sweep < opts.max_sweeps && !converged; ++sweep) {
        Scalar off = 0;
        for (Index i = 0; i < n - 1; ++i) {
            for (Index j = i + 1; j < n; ++j) {
                const Scalar alpha = work.col(i).squaredNorm();
                const Scalar beta = work.col(j).squaredNorm();
                const Scalar gamma = work.col(i).dot(work.col(j));
                if (alpha <= tiny || beta <= tiny) continue;
                const Scalar rel = abs(gamma) / sqrt(alpha * beta);
                off = std::max(off, rel);
                if (rel <= Scalar(opts.tolerance)) continue;
                const Scalar zeta = (beta - alpha) / (Scalar(2) * gamma);
                const Scalar t = (zeta >= 0 ? Scalar(1) : Scalar(-1)) / (abs(zeta) + sqrt(Scalar(1) + zeta * zeta));
                const Scalar c = Scalar(1) / sqrt(Scalar(1) + t * t);
                const Scalar s = c * t;
                for (Index r = 0; r < work.rows(); ++r) {
                    const Scalar wi = work(r, i), wj = work(r, j);
                    work(r, i) = c * wi - s * wj;
                    work(r, j) = s * wi + c * wj;
                }
                for (Index r = 0; r < n; ++r) {
                    const Scalar vi = v(r, i), vj = v(r, j);
                    v(r, i) = c * vi - s * vj;
                    v(r, j) = s * vi + c * vj;
                }
            }
        }
        converged = off <= Scalar(opts.tolerance);
    }
    if (!converged) {
        throw NumericError("one-sided Jacobi SVD did not converge within " + std::to_string(opts.max_sweeps) +
                           " sweeps");
    }

    VectorX<Scalar> sigma(n);
    for (Index i = 0; i < n; ++i) sigma(i) = work.col(i).norm();
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return sigma(a) > sigma(b); });

    Svd<Scalar> out;
    out.u = MatrixX<Scalar>::Zero(work.rows(), n);
    out.v = MatrixX<Scalar>(n, n);
    out.sigma = VectorX<Scalar>(n);
    for (Index k = 0; k < n; ++k) {
        const Index src = order[static_cast<std::size_t>(k)];
        out.sigma(k) = sigma(src);
        out.v.col(k) = v.col(src);
        if (sigma(src) > Scalar(0)) out.u.col(k) = work.col(src) / sigma(src);
    }
    return out;
}

}  // namespace detail

// Thin SVD a = u * diag(sigma) * v^T with k = min(rows, cols).
template <typename Derived>
Svd<typename Derived::Scalar> jacobi_svd(const Eigen::MatrixBase<Derived>& a, const JacobiOptions& opts = {}) {
    using Scalar = typename Derived::Scalar;
    if (!a.allFinite()) throw NumericError("jacobi_svd: non-finite input");
    if (a.rows() >= a.cols()) return detail::jacobi_svd_tall<Scalar>(MatrixX<Scalar>(a), opts);
    auto t = detail::jacobi_svd_tall<Scalar>(MatrixX<Scalar>(a.transpose()), opts);
    return Svd<Scalar>{std::move(t.v), std::move(t.sigma), std::move(t.u)};
}

// Singular values below rcond * sigma_max are treated as zero.
template <typename Derived>
MatrixX<typename Derived::Scalar> pseudo_inverse(const Eigen::MatrixBase<Derived>& a, double rcond = 1e-10) {
    using Scalar = typename Derived::Scalar;
    if (a.rows() > 1024 || a.cols() > 1024) throw ShapeError("pseudo_inverse: dimensions above 1024");
    const auto svd = jacobi_svd(a);
    const Scalar smax = svd.sigma.size() > 0 ? svd.sigma(0) : Scalar(0);
    VectorX<Scalar> inv = VectorX<Scalar>::Zero(svd.sigma.size());
    for (Index i = 0; i < svd.sigma.size(); ++i) {
        if (svd.sigma(i) > Scalar(rcond) * smax) inv(i) = Scalar(1) / svd.sigma(i);
    }
    return svd.v * inv.asDiagonal() * svd.u.transpose();
}

template <typename Derived>
Index numerical_rank(const Eigen::MatrixBase<Derived>& a, double rcond = 1e-10) {
    const auto svd = jacobi_svd(a);
    Index r = 0;
    for (Index i = 0; i < svd.sigma.size(); ++i) r += svd.sigma(i) > rcond * svd.sigma(0) ? 1 : 0;
    return r;
}

// --- FFT ------------------------------------------------------------------

template <typename Scalar>
using ComplexGrid = MatrixX<std::complex<Scalar>>;

inline bool is_power_of_two(Index n) { return n > 0 && (n & (n - 1)) == 0; }

namespace detail {

template <typename Scalar>
void fft_inplace(std::complex<Scalar>* data, Index n, Index stride, bool inverse) {
    // bit reversal
    for (Index i = 1, j = 0; i < n; ++i) {
        Index bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(data[i * stride], data[j * stride]);
    }
    const Scalar sign = inverse ? Scalar(1) : Scalar(-1);
    for (Index len = 2; len <= n; len <<= 1) {
        const Scalar ang = sign * Scalar(2) * std::numbers::pi_v<Scalar> / Scalar(len);
        const std::complex<Scalar> wlen(std::cos(ang), std::sin(ang));
        for (Index i = 0; i < n; i += len) {
            std::complex<Scalar> w(1);
            for (Index j = 0; j < len / 2; ++j) {
                const auto u = data[(i + j) * stride];
                const auto t = w * data[(i + j + len / 2) * stride];
                data[(i + j) * stride] = u + t;
                data[(i + j + len / 2) * stride] = u - t;
                w *= wlen;
            }
        }
    }
}

template <typename Scalar>
ComplexGrid<Scalar> fft2_impl(ComplexGrid<Scalar> grid, bool inverse) {
    const Index h = grid.rows(), w = grid.cols();
    if (!is_power_of_two(h) || !is_power_of_two(w)) {
        throw ShapeError("fft2 needs power-of-two dimensions, got " + std::to_string(h) + "x" + std::to_string(w));
    }
    for (Index r = 0; r < h; ++r) fft_inplace(grid.data() + r * w, w, 1, inverse);
    for (Index c = 0; c < w; ++c) fft_inplace(grid.data() + c, h, w, inverse);
    grid /= std::sqrt(static_cast<Scalar>(h * w));
    return grid;
}

}  // namespace detail

// Unitary 2-D DFT of a real grid.
template <typename Derived>
ComplexGrid<typename Derived::Scalar> fft2(const Eigen::MatrixBase<Derived>& x) {
    using Scalar = typename Derived::Scalar;
    return detail::fft2_impl<Scalar>(x.template cast<std::complex<Scalar>>(), false);
}

template <typename Scalar>
ComplexGrid<Scalar> fft2(const ComplexGrid<Scalar>& x) {
    return detail::fft2_impl<Scalar>(x, false);
}

template <typename Scalar>
ComplexGrid<Scalar> ifft2(const ComplexGrid<Scalar>& x) {
    return detail::fft2_impl<Scalar>(x, true);
}

}  // namespace flexdit
