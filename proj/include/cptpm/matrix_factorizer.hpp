// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cptpm/tensor.hpp"

namespace cptpm {

/// Truncated factors W_R = ud * vt with ud = U_R * diag(sigma_R).
struct SvdFactors {
    Tensor ud;  // M x R
    Tensor vt;  // R x N

    std::size_t rank() const { return vt.extent(0); }
    std::size_t rows() const { return ud.extent(0); }
    std::size_t cols() const { return vt.extent(1); }
    std::size_t parameter_count() const { return ud.size() + vt.size(); }

    void validate() const {
        if (ud.order() != 2 || vt.order() != 2 || ud.shape()[1] != vt.shape()[0])
            throw std::invalid_argument("svd factors: expected M x R and R x N, got " +
                                        shape_string(ud.shape()) + " and " +
                                        shape_string(vt.shape()));
    }

    bool operator==(const SvdFactors&) const = default;
};

/// Thin SVD, W = u * diag(sigma) * v^T with sigma sorted non-increasing.
/// u is M x K, v is N x K, K = min(M, N).
struct SvdResult {
    Tensor u;
    std::vector<double> sigma;
    Tensor v;
};

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.order() != 2 || b.order() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_string(a.shape()) +
                                    " and " + shape_string(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor c({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = c.data().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double w = pa[i * k + p];
            const double* row = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) pc[i * n + j] += w * row[j];
        }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.order() != 2) throw std::invalid_argument("transpose: expected a matrix");
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    Tensor t({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t.data()[j * m + i] = a.data()[i * n + j];
    return t;
}

namespace detail {

// One-sided Jacobi (Hestenes) on the columns of a tall m x n matrix held
// column-major in `cols`. On return the columns are mutually orthogonal and
// `v` (n x n, column-major) holds the accumulated rotations.
inline void hestenes_jacobi(std::vector<std::vector<double>>& cols,
                            std::vector<std::vector<double>>& v) {
    const std::size_t n = cols.size();
    constexpr double eps = std::numeric_limits<double>::epsilon();
    constexpr int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                auto& cp = cols[p];
                auto& cq = cols[q];
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < cp.size(); ++i) {
                    alpha += cp[i] * cp[i];
                    beta += cq[i] * cq[i];
                    gamma += cp[i] * cq[i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
                const double c = 1.0 / std::hypot(1.0, t);
                const double s = c * t;
                for (std::size_t i = 0; i < cp.size(); ++i) {
                    const double x = cp[i], y = cq[i];
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
                auto& vp = v[p];
                auto& vq = v[q];
                for (std::size_t i = 0; i < vp.size(); ++i) {
                    const double x = vp[i], y = vq[i];
                    vp[i] = c * x - s * y;
                    vq[i] = s * x + c * y;
                }
            }
        }
        if (!rotated) return;
    }
}

inline void check_matrix(const Tensor& w, const char* what) {
    if (w.order() != 2)
        throw std::invalid_argument(std::string(what) + ": expected a matrix, got " +
                                    shape_string(w.shape()));
    if (!all_finite(w)) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

}  // namespace detail

/// Thin SVD by one-sided Jacobi rotations applied on the thinner side.
inline SvdResult thin_svd(const Tensor& w) {
    detail::check_matrix(w, "thin_svd");
    const bool tall = w.shape()[0] >= w.shape()[1];
    const Tensor a = tall ? w : transpose(w);
    const std::size_t m = a.shape()[0], n = a.shape()[1];

    std::vector<std::vector<double>> cols(n, std::vector<double>(m));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) cols[j][i] = a.data()[i * n + j];
    std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;

    detail::hestenes_jacobi(cols, v);

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = l2_norm(cols[j]);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    // For a tall input the left vectors are the normalized columns; for a
    // wide input the roles of the two sides swap.
    Tensor left({m, n}), right({n, n});
    std::vector<double> sorted(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        sorted[k] = sigma[j];
        const double inv = sigma[j] > 0.0 ? 1.0 / sigma[j] : 0.0;
        for (std::size_t i = 0; i < m; ++i) left.data()[i * n + k] = cols[j][i] * inv;
        for (std::size_t i = 0; i < n; ++i) right.data()[i * n + k] = v[j][i];
    }
    if (tall) return {std::move(left), std::move(sorted), std::move(right)};
    return {std::move(right), std::move(sorted), std::move(left)};
}

/// Best rank-R approximation factors (Eckart-Young), with the singular
/// values folded into the left factor.
inline SvdFactors truncated_svd(const Tensor& w, std::size_t rank) {
    detail::check_matrix(w, "truncated_svd");
    const std::size_t m = w.shape()[0], n = w.shape()[1];
    if (rank < 1 || rank > std::min(m, n))
        throw std::invalid_argument("truncated_svd: rank " + std::to_string(rank) +
                                    " outside [1, " + std::to_string(std::min(m, n)) + "]");
    const SvdResult full = thin_svd(w);
    const std::size_t k = full.sigma.size();
    SvdFactors f{Tensor({m, rank}), Tensor({rank, n})};
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t r = 0; r < rank; ++r)
            f.ud.data()[i * rank + r] = full.u.data()[i * k + r] * full.sigma[r];
    for (std::size_t r = 0; r < rank; ++r)
        for (std::size_t j = 0; j < n; ++j) f.vt.data()[r * n + j] = full.v.data()[j * k + r];
    return f;
}

inline Tensor reconstruct(const SvdFactors& f) {
    f.validate();
    return matmul(f.ud, f.vt);
}

/// One fully connected layer y = W x as two: z = vt x, then y = ud z.
inline std::pair<Tensor, Tensor> split_fc(const Tensor& w, std::size_t rank) {
    SvdFactors f = truncated_svd(w, rank);
    return {std::move(f.ud), std::move(f.vt)};
}

}  // namespace cptpm
