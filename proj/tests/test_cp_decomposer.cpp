// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

#include "cptpm/cp_decomposer.hpp"
#include "cptpm/network.hpp"

using namespace cptpm;

namespace {

std::vector<std::vector<double>> orthonormal_columns(std::size_t n, std::size_t k, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> q;
    while (q.size() < k) {
        std::vector<double> v(n);
        for (double& x : v) x = normal(rng);
        for (const auto& u : q) {
            const double d = dot(v, u);
            for (std::size_t i = 0; i < n; ++i) v[i] -= d * u[i];
        }
        const double nv = l2_norm(v);
        for (double& x : v) x /= nv;
        q.push_back(std::move(v));
    }
    return q;
}

// Kernel T x S x D x D with K[t,s,j,i] = sum_r scale_r a_r[s] b_r[j*D+i] c_r[t].
Tensor kernel_from_terms(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b,
                         const std::vector<std::vector<double>>& c, const std::vector<double>& scales,
                         std::size_t D) {
    const std::size_t S = a[0].size(), T = c[0].size();
    Tensor k({T, S, D, D});
    for (std::size_t r = 0; r < scales.size(); ++r)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t q = 0; q < D * D; ++q)
                    k.data()[(t * S + s) * D * D + q] += scales[r] * a[r][s] * b[r][q] * c[r][t];
    return k;
}

double relative_residual(const Tensor& k, const CpFactors& f) {
    return frobenius_norm(add_scaled(k, reconstruct(f), -1.0)) / frobenius_norm(k);
}

}  // namespace

TEST(FitRank1, ExactRankOneInput) {
    Tensor target = outer_product({{1, 0}, {0, 1}, {1, 0}});
    for (double& x : target.data()) x *= 2.0;
    const Rank1Term term = fit_rank1(target, {});
    EXPECT_NEAR(term.scale, 2.0, 1e-12);
    // Canonical signs: a and b have a positive dominant entry, so no flips remain.
    EXPECT_NEAR(term.vectors[0][0], 1.0, 1e-12);
    EXPECT_NEAR(term.vectors[1][1], 1.0, 1e-12);
    EXPECT_NEAR(term.vectors[2][0], 1.0, 1e-12);
    EXPECT_LE(max_abs_diff(materialize(term), target), 1e-12);
}

TEST(FitRank1, RecoversScaleUnderTinyNoise) {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> a(4), b(9), c(5);
    for (auto* v : {&a, &b, &c})
        for (double& x : *v) x = normal(rng);
    Tensor target = outer_product({a, b, c});
    for (double& x : target.data()) x += 1e-9 * normal(rng);
    const Rank1Term term = fit_rank1(target, {});
    EXPECT_NEAR(term.scale, l2_norm(a) * l2_norm(b) * l2_norm(c), 1e-6);
    for (const auto& v : term.vectors) EXPECT_NEAR(l2_norm(v), 1.0, 1e-12);
}

TEST(FitRank1, ZeroTargetGivesZeroScale) {
    const Rank1Term term = fit_rank1(Tensor({2, 3, 4}), {});
    EXPECT_EQ(term.scale, 0.0);
    EXPECT_EQ(frobenius_norm(materialize(term)), 0.0);
}

TEST(FitRank1, RejectsNaNAndWrongOrder) {
    Tensor t({2, 2, 2}, 1.0);
    t.data()[3] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(fit_rank1(t, {}), std::invalid_argument);
    EXPECT_THROW(fit_rank1(Tensor({2, 2}), {}), std::invalid_argument);
    TpmConfig bad;
    bad.tol = 0.0;
    EXPECT_THROW(fit_rank1(Tensor({2, 2, 2}, 1.0), bad), std::invalid_argument);
}

class CpProperties : public ::testing::TestWithParam<int> {};

TEST_P(CpProperties, SweepObjectiveNeverIncreases) {
    std::mt19937_64 rng(GetParam());
    const Tensor target = random_tensor({3, 9, 4}, rng);
    std::vector<double> trace;
    TpmConfig cfg;
    cfg.seed = GetParam();
    const Rank1Term term = fit_rank1(target, cfg, &trace);
    ASSERT_FALSE(trace.empty());
    for (std::size_t i = 1; i < trace.size(); ++i)
        EXPECT_LE(trace[i], trace[i - 1] + 1e-12 * trace[0]) << "sweep " << i;
    // The final objective is the true squared residual of the returned term.
    const double resid = frobenius_norm(add_scaled(target, materialize(term), -1.0));
    EXPECT_NEAR(resid * resid, trace.back(), 1e-9 * trace[0]);
    for (const auto& v : term.vectors) EXPECT_NEAR(l2_norm(v), 1.0, 1e-12);
    EXPECT_GE(term.scale, 0.0);
}

TEST_P(CpProperties, ResidualCurveIsNonIncreasing) {
    std::mt19937_64 rng(1000 + GetParam());
    const Tensor k = random_tensor({3, 3, 3, 3}, rng);
    TpmConfig cfg;
    cfg.seed = GetParam();
    const auto curve = residual_curve(k, 12, cfg);
    ASSERT_EQ(curve.size(), 12u);
    EXPECT_LE(curve[0], 1.0);
    for (std::size_t r = 1; r < curve.size(); ++r) EXPECT_LE(curve[r], curve[r - 1]) << "rank " << r + 1;
}

TEST_P(CpProperties, ExactOrthogonalRankRIsRecovered) {
    std::mt19937_64 rng(2000 + GetParam());
    const std::size_t R = 1 + std::size_t(GetParam()) % 4;
    const auto a = orthonormal_columns(4, R, rng);
    const auto b = orthonormal_columns(9, R, rng);
    const auto c = orthonormal_columns(5, R, rng);
    std::vector<double> scales;
    for (std::size_t r = 0; r < R; ++r) scales.push_back(5.0 - 1.1 * double(r));
    const Tensor k = kernel_from_terms(a, b, c, scales, 3);
    TpmConfig cfg;
    cfg.rank = R;
    cfg.seed = GetParam();
    const CpFactors f = decompose_kernel(k, cfg);
    EXPECT_LE(relative_residual(k, f), 1e-8);
    // Recovered scales match the construction; greedy order may differ when
    // the start lands in another component's basin.
    auto got = component_scales(f);
    std::sort(got.begin(), got.end(), std::greater<>());
    for (std::size_t r = 0; r < R; ++r) EXPECT_NEAR(got[r], scales[r], 1e-8);
}

TEST_P(CpProperties, DecompositionIsDeterministic) {
    std::mt19937_64 rng(3000 + GetParam());
    const Tensor k = random_tensor({4, 3, 3, 3}, rng);
    TpmConfig cfg;
    cfg.rank = 5;
    cfg.seed = 99;
    EXPECT_EQ(decompose_kernel(k, cfg), decompose_kernel(k, cfg));
}

INSTANTIATE_TEST_SUITE_P(Seeds, CpProperties, ::testing::Range(0, 12));

TEST(DecomposeKernel, FactorInvariants) {
    std::mt19937_64 rng(5);
    const Tensor k = random_tensor({6, 4, 3, 3}, rng);
    TpmConfig cfg;
    cfg.rank = 7;
    const CpFactors f = decompose_kernel(k, cfg);
    EXPECT_EQ(f.u1.shape(), (Shape{7, 4}));
    EXPECT_EQ(f.u2.shape(), (Shape{7, 3, 3}));
    EXPECT_EQ(f.u3.shape(), (Shape{6, 7}));
    for (std::size_t r = 0; r < 7; ++r) {
        EXPECT_NEAR(l2_norm(f.u1.data().subspan(r * 4, 4)), 1.0, 1e-12);
        EXPECT_NEAR(l2_norm(f.u2.data().subspan(r * 9, 9)), 1.0, 1e-12);
    }
    EXPECT_EQ(reconstruct(f).shape(), k.shape());
}

TEST(DecomposeKernel, RankOneResidualIsTheSingleDeflation) {
    std::mt19937_64 rng(6);
    const Tensor k = random_tensor({5, 3, 3, 3}, rng);
    TpmConfig cfg;
    cfg.rank = 1;
    const CpFactors f = decompose_kernel(k, cfg);
    const double resid = frobenius_norm(add_scaled(k, reconstruct(f), -1.0));
    const double lambda = component_scales(f)[0];
    const double norm = frobenius_norm(k);
    EXPECT_NEAR(resid * resid, norm * norm - lambda * lambda, 1e-9 * norm * norm);
    EXPECT_NEAR(residual_curve(k, 1, cfg)[0], resid / norm, 1e-12);

    // Later greedy terms explain no more than the first.
    cfg.rank = 6;
    const auto scales = component_scales(decompose_kernel(k, cfg));
    for (std::size_t r = 1; r < scales.size(); ++r) EXPECT_LE(scales[r], scales[0]);
}

TEST(DecomposeKernel, AlexNetConv1FactorCount) {
    // 96 x 3 x 11 x 11 at rank 69: 69*3 + 69*121 + 96*69 = 15,180 entries.
    std::mt19937_64 rng(7);
    const Tensor k = random_tensor({96, 3, 11, 11}, rng);
    TpmConfig cfg;
    cfg.rank = 69;
    cfg.max_inner_iters = 3;
    const CpFactors f = decompose_kernel(k, cfg);
    EXPECT_EQ(f.parameter_count(), 15180u);
    EXPECT_EQ(decomposed_conv_params(ConvSpec{96, 3, 11, 4, 0, 1}, 69), 15180u);
}

TEST(DecomposeKernel, GroupedKernelDecomposesPerGroup) {
    // Two groups, each an exact rank-1 term: rank 2 (one per group) is lossless.
    const std::size_t Tg = 3, S = 2, D = 3;
    Tensor k({2 * Tg, S, D, D});
    std::mt19937_64 rng(8);
    for (std::size_t g = 0; g < 2; ++g) {
        const Tensor part = random_tensor({Tg, 1, 1, 1}, rng);
        const Tensor u1 = random_tensor({S}, rng);
        const Tensor u2 = random_tensor({D * D}, rng);
        for (std::size_t t = 0; t < Tg; ++t)
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t q = 0; q < D * D; ++q)
                    k.data()[((g * Tg + t) * S + s) * D * D + q] =
                        part.data()[t] * u1.data()[s] * u2.data()[q];
    }
    TpmConfig cfg;
    cfg.rank = 2;
    const CpFactors f = decompose_kernel(k, cfg, 2);
    EXPECT_EQ(f.groups, 2u);
    EXPECT_EQ(f.u3.shape(), (Shape{6, 1}));
    EXPECT_LE(relative_residual(k, f), 1e-10);

    // Odd total rank rounds up to a multiple of the group count.
    cfg.rank = 3;
    EXPECT_EQ(decompose_kernel(k, cfg, 2).rank(), 4u);
}

TEST(DecomposeKernel, RejectsRankAboveTrivialBound) {
    const Tensor k({2, 2, 1, 1}, 1.0);
    TpmConfig cfg;
    cfg.rank = 5;
    EXPECT_THROW(decompose_kernel(k, cfg), std::invalid_argument);
    cfg.rank = 4;
    EXPECT_NO_THROW(decompose_kernel(k, cfg));
    EXPECT_THROW(decompose_kernel(Tensor({2, 2, 3}), cfg), std::invalid_argument);
}

TEST(DecomposeKernel, FullRankRoundTrip) {
    std::mt19937_64 rng(9);
    const Tensor k = random_tensor({4, 3, 3, 3}, rng);
    TpmConfig cfg;
    // Greedy deflation is only guaranteed lossless at the entry-count bound.
    cfg.rank = 3 * 9 * 4;
    EXPECT_LE(relative_residual(k, decompose_kernel(k, cfg)), 1e-6);
    // At rank S*D^2 the greedy fit is already far better than at lower ranks.
    cfg.rank = 27;
    const double at27 = relative_residual(k, decompose_kernel(k, cfg));
    cfg.rank = 9;
    EXPECT_LT(at27, 0.1 * relative_residual(k, decompose_kernel(k, cfg)));
}

TEST(Reconstruct, SingleTermExpansion) {
    Tensor u2({1, 3, 3});
    u2.at({0, 0, 0}) = 1.0;
    const CpFactors f{Tensor::from_matrix({{1, 0}}), u2, Tensor::from_matrix({{2}, {0}}), 1};
    const Tensor k = reconstruct(f);
    ASSERT_EQ(k.shape(), (Shape{2, 2, 3, 3}));
    for (std::size_t i = 0; i < k.size(); ++i) EXPECT_EQ(k.data()[i], i == 0 ? 2.0 : 0.0);
}

TEST(Reconstruct, ZeroFactorsGiveZeroKernel) {
    const CpFactors f{Tensor({3, 2}), Tensor({3, 3, 3}), Tensor({4, 3}), 1};
    EXPECT_EQ(frobenius_norm(reconstruct(f)), 0.0);
}

TEST(Reconstruct, RejectsInconsistentFactors) {
    const CpFactors f{Tensor({3, 2}), Tensor({2, 3, 3}), Tensor({4, 3}), 1};
    EXPECT_THROW(reconstruct(f), std::invalid_argument);
}

TEST(ResidualCurve, ExactRankOneAndZeroKernel) {
    const Tensor k = outer_product({{1, -2}, {0.5, 1.5}, {1, 2, 3, 4, 5, 6, 7, 8, 9}}).reshaped({2, 2, 3, 3});
    const auto curve = residual_curve(k, 3, {});
    EXPECT_LE(curve[0], 1e-8);
    EXPECT_EQ(residual_curve(Tensor({2, 2, 3, 3}), 4, {}), std::vector<double>(4, 0.0));
    EXPECT_THROW(residual_curve(k, 0, {}), std::invalid_argument);
}
