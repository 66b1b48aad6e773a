// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "cptpm/rank_allocator.hpp"

using namespace cptpm;

namespace {

SensitivityReport report_from_losses(const std::string& group, const std::vector<double>& losses) {
    SensitivityReport r;
    r.baseline_accuracy = 1.0;
    for (std::size_t i = 0; i < losses.size(); ++i)
        r.entries.push_back({group + std::to_string(i + 1), group, 1.0 - losses[i], losses[i]});
    return r;
}

std::vector<std::size_t> ranks_of(const std::vector<RankAssignment>& a) {
    std::vector<std::size_t> out;
    for (const auto& r : a) out.push_back(r.rank);
    return out;
}

}  // namespace

TEST(Apportion, PublishedFcLosses) {
    EXPECT_EQ(apportion({28.59, 21.50, 20.31}, 900), (std::vector<std::size_t>{365, 275, 260}));
}

TEST(Apportion, PublishedConvLossesUnderLargestRemainder) {
    // Quotas 69.79, 154.23, 153.84, 177.45, 196.78 -> floors sum to 747;
    // the three largest remainders (0.84, 0.79, 0.78) take the last seats.
    EXPECT_EQ(apportion({5.38, 11.89, 11.86, 13.68, 15.17}, 750),
              (std::vector<std::size_t>{70, 154, 153, 177, 196}));
}

TEST(Apportion, EqualAndZeroLosses) {
    EXPECT_EQ(apportion({2.0, 2.0, 2.0}, 90), (std::vector<std::size_t>{30, 30, 30}));
    EXPECT_EQ(apportion({0.0, 0.0, 0.0}, 10), (std::vector<std::size_t>{4, 3, 3}));
    // Ties on the remainder go to the earlier layer.
    EXPECT_EQ(apportion({1.0, 1.0}, 3), (std::vector<std::size_t>{2, 1}));
}

TEST(Apportion, EveryEntryGetsAtLeastOne) {
    const auto seats = apportion({100.0, 0.0, 0.001}, 5);
    EXPECT_EQ(std::accumulate(seats.begin(), seats.end(), std::size_t{0}), 5u);
    for (auto s : seats) EXPECT_GE(s, 1u);
    EXPECT_EQ(seats[0], 3u);
}

TEST(Apportion, Errors) {
    EXPECT_THROW(apportion({1.0, 1.0, 1.0}, 2), std::invalid_argument);
    EXPECT_THROW(apportion({1.0, -1.0}, 4), std::invalid_argument);
    EXPECT_THROW(apportion({1.0, std::nan("")}, 4), std::invalid_argument);
    EXPECT_THROW(apportion({}, 4), std::invalid_argument);
}

TEST(AllocateRanks, GroupsAreIndependent) {
    SensitivityReport r = report_from_losses("conv", {0.0538, 0.1189, 0.1186, 0.1368, 0.1517});
    const SensitivityReport fc = report_from_losses("fc", {0.2859, 0.2150, 0.2031});
    r.entries.insert(r.entries.end(), fc.entries.begin(), fc.entries.end());
    const auto got = allocate_ranks(r, {{"conv", 750}, {"fc", 900}});
    EXPECT_EQ(ranks_of(got), (std::vector<std::size_t>{70, 154, 153, 177, 196, 365, 275, 260}));
    EXPECT_EQ(got[5].layer, "fc1");
    EXPECT_THROW(allocate_ranks(r, {{"conv", 750}}), std::invalid_argument);
    EXPECT_THROW(allocate_ranks(r, {{"conv", 4}, {"fc", 900}}), std::invalid_argument);
}

TEST(SensitivityReport, AddClampsNegativeLoss) {
    SensitivityReport r;
    r.baseline_accuracy = 0.8;
    r.add("conv1", "conv", 0.75);
    r.add("conv2", "conv", 0.85);
    EXPECT_NEAR(r.entries[0].loss, 0.05, 1e-15);
    EXPECT_EQ(r.entries[1].loss, 0.0);
}

TEST(TextFormats, SensitivityRoundTrip) {
    SensitivityReport r;
    r.baseline_accuracy = 0.7995;
    r.add("conv1", "conv", 0.7457);
    r.add("fc6", "fc", 0.5136);
    std::vector<RankAssignment> ranks{{"conv1", 69}, {"fc6", 365}};
    std::stringstream ss;
    write_sensitivity_report(ss, r, &ranks);
    EXPECT_NE(ss.str().find("conv\tconv1\t74.5700\t5.3800\t69"), std::string::npos) << ss.str();
    const SensitivityReport back = read_sensitivity_report(ss);
    ASSERT_EQ(back.entries.size(), 2u);
    EXPECT_NEAR(back.baseline_accuracy, 0.7995, 1e-12);
    EXPECT_EQ(back.entries[1].layer, "fc6");
    EXPECT_NEAR(back.entries[1].loss, 0.2859, 1e-12);
}

TEST(TextFormats, RanksRoundTripAndErrors) {
    const std::vector<RankAssignment> ranks{{"conv1", 69}, {"fc8", 260}};
    std::stringstream ss;
    write_ranks(ss, ranks);
    EXPECT_EQ(read_ranks(ss), ranks);
    for (const char* bad : {"conv1\t0\n", "conv1\n", "conv1\t-3\n", "conv1\t4\textra\n", "conv1\tx\n"}) {
        std::istringstream is(bad);
        EXPECT_THROW(read_ranks(is), std::invalid_argument) << bad;
    }
}

class AllocatorProperties : public ::testing::TestWithParam<int> {};

TEST_P(AllocatorProperties, SumMonotonicityAndScaleInvariance) {
    std::mt19937_64 rng(GetParam());
    std::uniform_int_distribution<std::size_t> count(1, 8);
    std::uniform_real_distribution<double> loss(0.0, 0.3);
    const std::size_t n = count(rng);
    std::vector<double> losses(n);
    for (double& l : losses) l = loss(rng);
    std::uniform_int_distribution<std::size_t> extra(0, 1000);
    const std::size_t budget = n + extra(rng);

    const auto seats = apportion(losses, budget);
    EXPECT_EQ(std::accumulate(seats.begin(), seats.end(), std::size_t{0}), budget);
    for (std::size_t a = 0; a < n; ++a) {
        EXPECT_GE(seats[a], 1u);
        for (std::size_t b = 0; b < n; ++b)
            if (losses[a] > losses[b]) {
                EXPECT_GE(seats[a], seats[b]) << a << " vs " << b;
            }
    }
    // Powers of two scale exactly, so the quotas are bit-identical.
    std::vector<double> scaled = losses;
    for (double& l : scaled) l *= 8.0;
    EXPECT_EQ(apportion(scaled, budget), seats);
    for (double& l : scaled) l = l / 8.0 * 3.0;
    EXPECT_EQ(apportion(scaled, budget), seats);
}

INSTANTIATE_TEST_SUITE_P(Seeds, AllocatorProperties, ::testing::Range(0, 50));
