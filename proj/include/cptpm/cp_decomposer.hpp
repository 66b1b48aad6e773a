// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cptpm/tensor.hpp"

namespace cptpm {

struct TpmConfig {
    std::size_t rank = 1;
    int max_inner_iters = 200;
    double tol = 1e-8;
    std::uint64_t seed = 0;

    void validate() const {
        if (rank < 1) throw std::invalid_argument("tpm: rank must be >= 1");
        if (max_inner_iters < 1) throw std::invalid_argument("tpm: max_inner_iters must be >= 1");
        if (!(tol > 0.0)) throw std::invalid_argument("tpm: tol must be > 0");
    }
};

/// Factors of a rank-R kernel approximation
///
///   K[t,s,j,i] = sum_r u1[r,s] * u2[r,j,i] * u3[t,r]
///
/// For grouped kernels (groups = g) each group owns R/g consecutive
/// components: u1 is R x (S/g), u3 is T x (R/g), and output channel t only
/// mixes the components of its own group.
struct CpFactors {
    Tensor u1;  // R x S_g
    Tensor u2;  // R x D x D
    Tensor u3;  // T x R_g
    std::size_t groups = 1;

    std::size_t rank() const { return u1.extent(0); }
    std::size_t rank_per_group() const { return u3.extent(1); }
    std::size_t out_channels() const { return u3.extent(0); }
    std::size_t in_channels_per_group() const { return u1.extent(1); }
    std::size_t kernel_size() const { return u2.extent(1); }
    std::size_t parameter_count() const { return u1.size() + u2.size() + u3.size(); }

    void validate() const {
        if (u1.order() != 2 || u2.order() != 3 || u3.order() != 2)
            throw std::invalid_argument("cp factors: expected u1 2-way, u2 3-way, u3 2-way");
        const std::size_t r = u1.shape()[0];
        if (groups < 1) throw std::invalid_argument("cp factors: groups must be >= 1");
        if (u2.shape()[0] != r || u2.shape()[1] != u2.shape()[2])
            throw std::invalid_argument("cp factors: u2 must be R x D x D, got " +
                                        shape_string(u2.shape()));
        if (r % groups != 0 || u3.shape()[1] * groups != r || u3.shape()[0] % groups != 0)
            throw std::invalid_argument("cp factors: inconsistent group structure, u1 " +
                                        shape_string(u1.shape()) + ", u3 " +
                                        shape_string(u3.shape()) + ", groups " +
                                        std::to_string(groups));
    }

    bool operator==(const CpFactors&) const = default;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* what) {
    if (!all_finite(t)) throw std::invalid_argument(std::string(what) + ": non-finite input");
}

inline double normalize(std::vector<double>& v) {
    const double n = l2_norm(v);
    if (n > 0.0)
        for (double& x : v) x /= n;
    return n;
}

// The three partial contractions of a 3-way tensor X (I x J x K):
//   along_i[i] = sum_jk X[i,j,k] b[j] c[k], and so on.
inline std::vector<double> contract_jk(const Tensor& x, const std::vector<double>& b,
                                       const std::vector<double>& c) {
    const std::size_t I = x.shape()[0], J = x.shape()[1], K = x.shape()[2];
    const double* p = x.data().data();
    std::vector<double> out(I, 0.0);
    for (std::size_t i = 0; i < I; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < J; ++j) {
            const double* row = p + (i * J + j) * K;
            double t = 0.0;
            for (std::size_t k = 0; k < K; ++k) t += row[k] * c[k];
            s += t * b[j];
        }
        out[i] = s;
    }
    return out;
}

inline std::vector<double> contract_ik(const Tensor& x, const std::vector<double>& a,
                                       const std::vector<double>& c) {
    const std::size_t I = x.shape()[0], J = x.shape()[1], K = x.shape()[2];
    const double* p = x.data().data();
    std::vector<double> out(J, 0.0);
    for (std::size_t i = 0; i < I; ++i) {
        for (std::size_t j = 0; j < J; ++j) {
            const double* row = p + (i * J + j) * K;
            double t = 0.0;
            for (std::size_t k = 0; k < K; ++k) t += row[k] * c[k];
            out[j] += a[i] * t;
        }
    }
    return out;
}

inline std::vector<double> contract_ij(const Tensor& x, const std::vector<double>& a,
                                       const std::vector<double>& b) {
    const std::size_t I = x.shape()[0], J = x.shape()[1], K = x.shape()[2];
    const double* p = x.data().data();
    std::vector<double> out(K, 0.0);
    for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j) {
            const double w = a[i] * b[j];
            const double* row = p + (i * J + j) * K;
            for (std::size_t k = 0; k < K; ++k) out[k] += w * row[k];
        }
    return out;
}

// Leading left singular direction of the mode-`mode` unfolding, approximated
// by power iterations on X_(n) X_(n)^T from a seeded random start.
inline std::vector<double> unfolding_leading_direction(const Tensor& x, std::size_t mode,
                                                       std::mt19937_64& rng, int iterations) {
    const std::size_t I = x.shape()[0], J = x.shape()[1], K = x.shape()[2];
    const double* p = x.data().data();
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(x.shape()[mode]);
    for (double& e : v) e = normal(rng);
    normalize(v);

    std::vector<double> w(I * J * K / x.shape()[mode]);
    for (int it = 0; it < iterations; ++it) {
        std::fill(w.begin(), w.end(), 0.0);
        // w = X_(n)^T v, indexed by the remaining two modes in row-major order.
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t j = 0; j < J; ++j)
                for (std::size_t k = 0; k < K; ++k) {
                    const double e = p[(i * J + j) * K + k];
                    if (mode == 0) w[j * K + k] += e * v[i];
                    else if (mode == 1) w[i * K + k] += e * v[j];
                    else w[i * J + j] += e * v[k];
                }
        std::vector<double> next(v.size(), 0.0);
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t j = 0; j < J; ++j)
                for (std::size_t k = 0; k < K; ++k) {
                    const double e = p[(i * J + j) * K + k];
                    if (mode == 0) next[i] += e * w[j * K + k];
                    else if (mode == 1) next[j] += e * w[i * K + k];
                    else next[k] += e * w[i * J + j];
                }
        if (normalize(next) == 0.0) break;
        v = std::move(next);
    }
    return v;
}

// Flip a vector so its largest-magnitude entry is positive; returns the sign applied.
inline double canonical_sign(std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (std::abs(v[i]) > std::abs(v[best])) best = i;
    if (v[best] < 0.0) {
        for (double& e : v) e = -e;
        return -1.0;
    }
    return 1.0;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finalizer
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr int kInitPowerIterations = 5;

}  // namespace detail

/// Best rank-1 fit of a 3-way tensor by alternating (coordinate-descent)
/// updates. Returns unit vectors (a, b, c) with scale >= 0; the sign is
/// carried by c after a and b are made canonical.
///
/// A zero target yields a zero-scale term. If `objective_trace` is given it
/// receives ||target - scale * a(x)b(x)c||^2 after every sweep.
inline Rank1Term fit_rank1(const Tensor& target, const TpmConfig& cfg,
                           std::vector<double>* objective_trace = nullptr) {
    cfg.validate();
    if (target.order() != 3)
        throw std::invalid_argument("fit_rank1: expected a 3-way tensor, got " +
                                    shape_string(target.shape()));
    detail::check_finite(target, "fit_rank1");

    const double norm = frobenius_norm(target);
    Rank1Term term;
    if (norm == 0.0) {
        for (std::size_t m = 0; m < 3; ++m) {
            std::vector<double> e(target.shape()[m], 0.0);
            e[0] = 1.0;
            term.vectors.push_back(std::move(e));
        }
        return term;
    }
    const double norm_sq = norm * norm;

    std::mt19937_64 rng(cfg.seed);
    std::vector<double> a = detail::unfolding_leading_direction(target, 0, rng, detail::kInitPowerIterations);
    std::vector<double> b = detail::unfolding_leading_direction(target, 1, rng, detail::kInitPowerIterations);
    std::vector<double> c = detail::unfolding_leading_direction(target, 2, rng, detail::kInitPowerIterations);

    double lambda = 0.0;
    for (int sweep = 0; sweep < cfg.max_inner_iters; ++sweep) {
        std::vector<double> na = detail::contract_jk(target, b, c);
        if (detail::normalize(na) == 0.0) break;
        a = std::move(na);
        std::vector<double> nb = detail::contract_ik(target, a, c);
        if (detail::normalize(nb) == 0.0) break;
        b = std::move(nb);
        std::vector<double> nc = detail::contract_ij(target, a, b);
        const double next = detail::normalize(nc);
        if (next == 0.0) break;
        c = std::move(nc);

        const double change = std::abs(next - lambda);
        lambda = next;
        if (objective_trace) objective_trace->push_back(norm_sq - lambda * lambda);
        if (change < cfg.tol * lambda) break;
    }

    const double sa = detail::canonical_sign(a);
    const double sb = detail::canonical_sign(b);
    if (sa * sb < 0.0)
        for (double& e : c) e = -e;
    term.vectors = {std::move(a), std::move(b), std::move(c)};
    term.scale = lambda;
    return term;
}

/// Greedy CP by deflation: fit a rank-1 term, subtract it, repeat.
/// `residual_norms`, if given, receives ||residual|| after each term.
inline std::vector<Rank1Term> tpm_decompose(const Tensor& target, const TpmConfig& cfg,
                                            std::vector<double>* residual_norms = nullptr) {
    cfg.validate();
    if (target.order() != 3)
        throw std::invalid_argument("tpm_decompose: expected a 3-way tensor");
    if (cfg.rank > target.size())
        throw std::invalid_argument("tpm_decompose: rank " + std::to_string(cfg.rank) +
                                    " exceeds trivial bound " + std::to_string(target.size()));
    detail::check_finite(target, "tpm_decompose");

    std::vector<Rank1Term> terms;
    terms.reserve(cfg.rank);
    Tensor residual = target;
    for (std::size_t r = 0; r < cfg.rank; ++r) {
        TpmConfig step = cfg;
        step.seed = detail::mix_seed(cfg.seed, r);
        Rank1Term term = fit_rank1(residual, step);
        if (term.scale != 0.0) residual = add_scaled(residual, materialize(term), -1.0);
        if (residual_norms) residual_norms->push_back(frobenius_norm(residual));
        terms.push_back(std::move(term));
    }
    return terms;
}

/// Rank-R CP factors of a T x S_g x D x D kernel. The two spatial modes are
/// fused into one D*D mode, so each group is decomposed as an
/// S_g x D^2 x T_g tensor; each group receives ceil(rank / groups) terms.
inline CpFactors decompose_kernel(const Tensor& kernel, const TpmConfig& cfg,
                                  std::size_t groups = 1) {
    cfg.validate();
    if (kernel.order() != 4)
        throw std::invalid_argument("decompose_kernel: expected a 4-way kernel, got " +
                                    shape_string(kernel.shape()));
    const std::size_t T = kernel.shape()[0], S = kernel.shape()[1], D = kernel.shape()[2];
    if (kernel.shape()[3] != D) throw std::invalid_argument("decompose_kernel: kernel must be square");
    if (groups < 1 || T % groups != 0)
        throw std::invalid_argument("decompose_kernel: groups must divide output channels");
    const std::size_t Tg = T / groups;
    const std::size_t Rg = (cfg.rank + groups - 1) / groups;
    const std::size_t DD = D * D;
    if (Rg > S * DD * Tg)
        throw std::invalid_argument("decompose_kernel: rank " + std::to_string(cfg.rank) +
                                    " exceeds trivial bound of the unfolding (" +
                                    std::to_string(S * DD * Tg * groups) + ")");
    detail::check_finite(kernel, "decompose_kernel");

    const std::size_t R = Rg * groups;
    CpFactors f{Tensor({R, S}), Tensor({R, D, D}), Tensor({T, Rg}), groups};
    const double* k = kernel.data().data();
    for (std::size_t g = 0; g < groups; ++g) {
        Tensor x({S, DD, Tg});
        auto xd = x.data();
        for (std::size_t t = 0; t < Tg; ++t)
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t q = 0; q < DD; ++q)
                    xd[(s * DD + q) * Tg + t] = k[((g * Tg + t) * S + s) * DD + q];

        TpmConfig gc = cfg;
        gc.rank = Rg;
        gc.seed = detail::mix_seed(cfg.seed, 0x1000 + g);
        const auto terms = tpm_decompose(x, gc);
        for (std::size_t r = 0; r < Rg; ++r) {
            const auto& term = terms[r];
            const std::size_t row = g * Rg + r;
            for (std::size_t s = 0; s < S; ++s) f.u1.data()[row * S + s] = term.vectors[0][s];
            for (std::size_t q = 0; q < DD; ++q) f.u2.data()[row * DD + q] = term.vectors[1][q];
            for (std::size_t t = 0; t < Tg; ++t)
                f.u3.data()[(g * Tg + t) * Rg + r] = term.scale * term.vectors[2][t];
        }
    }
    return f;
}

inline Tensor reconstruct(const CpFactors& f) {
    f.validate();
    const std::size_t Rg = f.rank_per_group(), T = f.out_channels();
    const std::size_t S = f.in_channels_per_group(), D = f.kernel_size(), DD = D * D;
    const std::size_t Tg = T / f.groups;
    Tensor k({T, S, D, D});
    double* out = k.data().data();
    const double* u1 = f.u1.data().data();
    const double* u2 = f.u2.data().data();
    const double* u3 = f.u3.data().data();
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t g = t / Tg;
        for (std::size_t rl = 0; rl < Rg; ++rl) {
            const std::size_t r = g * Rg + rl;
            const double w = u3[t * Rg + rl];
            if (w == 0.0) continue;
            for (std::size_t s = 0; s < S; ++s) {
                const double ws = w * u1[r * S + s];
                double* dst = out + (t * S + s) * DD;
                for (std::size_t q = 0; q < DD; ++q) dst[q] += ws * u2[r * DD + q];
            }
        }
    }
    return k;
}

/// Per-component scale: the norm of each u3 column. Equals the fitted
/// lambda for factors fresh out of decompose_kernel.
inline std::vector<double> component_scales(const CpFactors& f) {
    const std::size_t Rg = f.rank_per_group(), Tg = f.out_channels() / f.groups;
    std::vector<double> scales(f.rank(), 0.0);
    for (std::size_t t = 0; t < f.out_channels(); ++t) {
        const std::size_t g = t / Tg;
        for (std::size_t rl = 0; rl < Rg; ++rl) {
            const double v = f.u3.data()[t * Rg + rl];
            scales[g * Rg + rl] += v * v;
        }
    }
    for (double& s : scales) s = std::sqrt(s);
    return scales;
}

/// Relative residual ||K - K_r|| / ||K|| after r = 1..max_rank greedy terms.
inline std::vector<double> residual_curve(const Tensor& kernel, std::size_t max_rank,
                                          const TpmConfig& cfg) {
    if (max_rank < 1) throw std::invalid_argument("residual_curve: max_rank must be >= 1");
    if (kernel.order() != 4)
        throw std::invalid_argument("residual_curve: expected a 4-way kernel");
    const std::size_t T = kernel.shape()[0], S = kernel.shape()[1], D = kernel.shape()[2];
    const std::size_t DD = D * D;
    if (max_rank > S * DD * T)
        throw std::invalid_argument("residual_curve: rank exceeds trivial bound of the unfolding");
    detail::check_finite(kernel, "residual_curve");

    const double norm = frobenius_norm(kernel);
    if (norm == 0.0) return std::vector<double>(max_rank, 0.0);

    Tensor x({S, DD, T});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t q = 0; q < DD; ++q)
                x.data()[(s * DD + q) * T + t] = kernel.data()[(t * S + s) * DD + q];

    TpmConfig gc = cfg;
    gc.rank = max_rank;
    gc.seed = detail::mix_seed(cfg.seed, 0x1000);
    std::vector<double> residuals;
    tpm_decompose(x, gc, &residuals);
    for (double& r : residuals) r /= norm;
    return residuals;
}

}  // namespace cptpm
