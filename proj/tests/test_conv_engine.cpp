// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "cptpm/conv_engine.hpp"
#include "cptpm/network.hpp"
#include "oracles.hpp"

using namespace cptpm;

namespace {

CpFactors random_factors(const ConvSpec& s, std::size_t rank, std::mt19937_64& rng) {
    const std::size_t rg = rank / s.groups;
    return CpFactors{random_tensor({rank, s.in_per_group()}, rng),
                     random_tensor({rank, s.kernel_size, s.kernel_size}, rng),
                     random_tensor({s.out_channels, rg}, rng), s.groups};
}

}  // namespace

TEST(ConvForward, CenteredDeltaKernelIsIdentity) {
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor({1, 5, 5}, rng);
    Tensor k({1, 1, 3, 3});
    k.at({0, 0, 1, 1}) = 1.0;
    EXPECT_EQ(conv_forward(x, k, ConvSpec{1, 1, 3, 1, 1, 1}), x);
}

TEST(ConvForward, OnesKernelSumsTheWindow) {
    const Tensor y = conv_forward(Tensor({1, 3, 3}, 1.0), Tensor({1, 1, 3, 3}, 1.0), ConvSpec{1, 1, 3});
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
    EXPECT_EQ(y.data()[0], 9.0);
}

TEST(ConvForward, OutputShapeAndSpecErrors) {
    EXPECT_EQ(ConvSpec({96, 3, 11, 4, 0}).output_extent(227), 55u);
    EXPECT_EQ(ConvSpec({1, 1, 3, 2, 1}).output_extent(7), 4u);
    EXPECT_THROW(ConvSpec({1, 1, 3, 2, 0}).output_extent(6), std::invalid_argument);
    EXPECT_THROW(ConvSpec({1, 1, 5, 1, 0}).output_extent(3), std::invalid_argument);
    EXPECT_THROW(ConvSpec({1, 1, 2}).validate(), std::invalid_argument);
    EXPECT_THROW(ConvSpec({4, 3, 3, 1, 0, 2}).validate(), std::invalid_argument);
    EXPECT_THROW(conv_forward(Tensor({2, 3, 3}), Tensor({1, 1, 3, 3}), ConvSpec{1, 1, 3}),
                 std::invalid_argument);
    EXPECT_THROW(conv_forward(Tensor({1, 3, 3}), Tensor({1, 1, 1, 1}), ConvSpec{1, 1, 3}),
                 std::invalid_argument);
}

class ConvProperties : public ::testing::TestWithParam<int> {};

TEST_P(ConvProperties, MatchesIndexFormulaOracle) {
    std::mt19937_64 rng(GetParam());
    const std::size_t groups = 1 + std::size_t(GetParam()) % 2;
    const std::size_t stride = 1 + std::size_t(GetParam()) % 3;
    const std::size_t D = GetParam() % 4 == 0 ? 5 : 3;
    const std::size_t p = std::size_t(GetParam()) % 3;
    // Pick an input extent for which the output extent is an integer.
    std::size_t W = 9;
    while ((W + 2 * p - D) % stride != 0) ++W;
    const ConvSpec spec{4, 2 * groups, D, stride, p, groups};
    const Tensor x = random_tensor({spec.in_channels, W, W}, rng);
    const Tensor k = random_tensor(spec.kernel_shape(), rng);
    const Tensor expected = oracle::naive_conv(x, k, spec);
    EXPECT_LE(max_abs_diff(conv_forward(x, k, spec), expected), 1e-12 * std::max(1.0, max_abs(expected)));
}

TEST_P(ConvProperties, FactorizedPipelineMatchesReconstructedKernel) {
    std::mt19937_64 rng(100 + GetParam());
    const std::size_t groups = 1 + std::size_t(GetParam()) % 2;
    const ConvSpec spec{6, 4, 3, 1 + std::size_t(GetParam()) % 2, 1, groups};
    const CpFactors f = random_factors(spec, 2 * groups + 2 * (GetParam() % 3), rng);
    const Tensor x = random_tensor({4, 9, 9}, rng);
    const Tensor expected = oracle::naive_conv(x, reconstruct(f), spec);
    const Tensor got = conv_forward_decomposed(x, f, spec);
    EXPECT_LE(max_abs_diff(got, expected), 1e-11 * std::max(1.0, max_abs(expected)));
}

TEST_P(ConvProperties, IsLinearInTheInput) {
    std::mt19937_64 rng(200 + GetParam());
    const ConvSpec spec{3, 2, 3, 1, 1};
    const Tensor k = random_tensor(spec.kernel_shape(), rng);
    const Tensor a = random_tensor({2, 6, 6}, rng), b = random_tensor({2, 6, 6}, rng);
    std::normal_distribution<double> n(0.0, 1.0);
    const double alpha = n(rng), beta = n(rng);
    const Tensor mixed = add_scaled(add_scaled(Tensor(a.shape()), a, alpha), b, beta);
    const Tensor lhs = conv_forward(mixed, k, spec);
    const Tensor rhs = add_scaled(add_scaled(Tensor(lhs.shape()), conv_forward(a, k, spec), alpha),
                                  conv_forward(b, k, spec), beta);
    EXPECT_LE(max_abs_diff(lhs, rhs), 1e-11 * std::max(1.0, max_abs(lhs)));
}

INSTANTIATE_TEST_SUITE_P(Seeds, ConvProperties, ::testing::Range(0, 16));

TEST(DecomposedConv, IntermediateShapes) {
    std::mt19937_64 rng(5);
    const ConvSpec spec{8, 4, 3, 2, 1};
    const CpFactors f = random_factors(spec, 5, rng);
    const auto trace = conv_forward_decomposed_trace(random_tensor({4, 9, 9}, rng), f, spec);
    EXPECT_EQ(trace.z.shape(), (Shape{5, 9, 9}));
    EXPECT_EQ(trace.z_spatial.shape(), (Shape{5, 5, 5}));
    EXPECT_EQ(trace.y.shape(), (Shape{8, 5, 5}));
}

TEST(DecomposedConv, StageSpecsCarryStrideAndGroups) {
    std::mt19937_64 rng(6);
    const ConvSpec spec{8, 4, 5, 2, 2, 2};
    const auto st = decomposed_stage_specs(spec, random_factors(spec, 6, rng));
    EXPECT_EQ(st.input_mix, (ConvSpec{6, 4, 1, 1, 0, 2}));
    EXPECT_EQ(st.spatial, (ConvSpec{6, 6, 5, 2, 2, 6}));
    EXPECT_EQ(st.output_mix, (ConvSpec{8, 6, 1, 1, 0, 2}));
    EXPECT_THROW(decomposed_stage_specs(ConvSpec{8, 4, 3, 2, 2, 2}, random_factors(spec, 6, rng)),
                 std::invalid_argument);
}

TEST(OpCounter, CountsMatchTheClosedForms) {
    if (!kCountMultiplies) GTEST_SKIP() << "multiply counting compiled out";
    std::mt19937_64 rng(7);
    const ConvSpec spec{16, 8, 3, 2, 1, 2};
    const std::size_t W = 11, R = 6;
    const Tensor x = random_tensor({8, W, W}, rng);
    const std::size_t Wo = spec.output_extent(W);

    OpCounter direct;
    conv_forward(x, random_tensor(spec.kernel_shape(), rng), spec, &direct);
    EXPECT_EQ(direct.multiplies, 16u * 4 * 9 * Wo * Wo);

    OpCounter factored;
    conv_forward_decomposed(x, random_factors(spec, R, rng), spec, &factored);
    EXPECT_EQ(factored.multiplies, R * 4 * W * W + R * 9 * Wo * Wo + 16 * (R / 2) * Wo * Wo);
    EXPECT_EQ(factored.multiplies, decomposed_conv_mults(spec, R, W, W, Wo, Wo));

    OpCounter fc;
    fc_forward(Tensor({5}), Tensor({3, 5}), Tensor({3}), &fc);
    EXPECT_EQ(fc.multiplies, 15u);
}

TEST(FcForward, RowsAreOutputs) {
    const Tensor y = fc_forward(Tensor::from_vector({1, 2}), Tensor::from_matrix({{1, 1}, {0, 3}}),
                                Tensor::from_vector({0, 0}));
    EXPECT_EQ(y, Tensor::from_vector({3, 6}));
    EXPECT_EQ(fc_forward(Tensor::from_vector({1, 2}), Tensor::from_matrix({{1, 1}}), Tensor::from_vector({0.5})),
              Tensor::from_vector({3.5}));
    EXPECT_THROW(fc_forward(Tensor({3}), Tensor({2, 2}), Tensor({2})), std::invalid_argument);
    EXPECT_THROW(fc_forward(Tensor({2}), Tensor({2, 2}), Tensor({3})), std::invalid_argument);
}

TEST(Relu, ClampsNegatives) {
    EXPECT_EQ(relu(Tensor::from_vector({-1, 0, 2.5})), Tensor::from_vector({0, 0, 2.5}));
}

TEST(MaxPool, FloorRuleAndValues) {
    Tensor x({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x.data()[i] = double(i);
    const Tensor y = max_pool(x, 2, 2);
    EXPECT_EQ(y, Tensor({1, 2, 2}, std::vector<double>{5, 7, 13, 15}));
    EXPECT_EQ(max_pool(Tensor({2, 55, 55}), 3, 2).shape(), (Shape{2, 27, 27}));
    EXPECT_EQ(max_pool(Tensor({1, 5, 5}), 2, 2).shape(), (Shape{1, 2, 2}));
    EXPECT_THROW(max_pool(Tensor({1, 2, 2}), 3, 1), std::invalid_argument);
}

TEST(ChannelBias, AddsPerChannel) {
    Tensor y({2, 1, 2});
    add_channel_bias(y, Tensor::from_vector({1, -2}));
    EXPECT_EQ(y, Tensor({2, 1, 2}, std::vector<double>{1, 1, -2, -2}));
    EXPECT_THROW(add_channel_bias(y, Tensor({3})), std::invalid_argument);
}
