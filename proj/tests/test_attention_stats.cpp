// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "tokprune/attention_stats.hpp"

namespace tokprune {
namespace {

AttentionMap from(const oracle::Matrix& m) {
    return AttentionMap(m.size(), m.front().size(), oracle::flatten(m));
}

TEST(AttentionMapTest, RejectsRowsThatAreNotDistributions) {
    EXPECT_THROW(AttentionMap(1, 2, {0.5, 0.6}), validation_error);
    EXPECT_THROW(AttentionMap(1, 2, {1.5, -0.5}), validation_error);
    EXPECT_THROW(AttentionMap(1, 2, {0.5}), validation_error);
    EXPECT_THROW(AttentionMap(0, 2, {}), validation_error);
    EXPECT_NO_THROW(AttentionMap(1, 2, {0.5, 0.5 + 5e-6}));
}

TEST(AggregateHeadsTest, SingleHeadIsUnchanged) {
    std::mt19937_64 rng(1);
    const AttentionMap head = from(oracle::random_softmax(3, 5, rng));
    const std::vector<AttentionMap> heads{head};
    const AttentionMap out = aggregate_heads(heads);
    for (std::size_t k = 0; k < head.weights().size(); ++k) {
        EXPECT_NEAR(out.weights()[k], head.weights()[k], 1e-15);
    }
}

TEST(AggregateHeadsTest, UniformAndDeterministicHeads) {
    const std::size_t nv = 4;
    const std::vector<AttentionMap> heads{AttentionMap(1, nv, {0.25, 0.25, 0.25, 0.25}),
                                          AttentionMap(1, nv, {1.0, 0.0, 0.0, 0.0})};
    const AttentionMap out = aggregate_heads(heads);
    EXPECT_DOUBLE_EQ(out(0, 0), (1.0 + 1.0 / nv) / 2.0);
    for (std::size_t i = 1; i < nv; ++i) {
        EXPECT_DOUBLE_EQ(out(0, i), (1.0 / nv) / 2.0);
    }
}

TEST(AggregateHeadsTest, MatchesPerEntryMeanOracle) {
    std::mt19937_64 rng(8);
    std::vector<oracle::Matrix> raw;
    std::vector<AttentionMap> heads;
    for (int h = 0; h < 8; ++h) {
        raw.push_back(oracle::random_softmax(4, 6, rng));
        heads.push_back(from(raw.back()));
    }
    const oracle::Matrix expected = oracle::mean_of(raw);
    const AttentionMap out = aggregate_heads(heads);
    for (std::size_t j = 0; j < 4; ++j) {
        for (std::size_t i = 0; i < 6; ++i) {
            EXPECT_NEAR(out(j, i), expected[j][i], 1e-12);
        }
    }
}

TEST(AggregateHeadsTest, Errors) {
    EXPECT_THROW(aggregate_heads({}), usage_error);
    const std::vector<AttentionMap> mixed{AttentionMap(1, 2, {0.5, 0.5}),
                                          AttentionMap(1, 3, {0.2, 0.3, 0.5})};
    EXPECT_THROW(aggregate_heads(mixed), usage_error);
}

TEST(JointDistributionTest, UniformAttention) {
    const AttentionMap attn(2, 4, std::vector<double>(8, 0.25));
    const JointTable joint = joint_distribution(attn);
    for (double p : joint.p) {
        EXPECT_DOUBLE_EQ(p, 1.0 / 8.0);
    }
}

TEST(JointDistributionTest, SingleTextTokenIsTheRow) {
    const std::vector<double> row{0.1, 0.2, 0.7};
    const JointTable joint = joint_distribution(AttentionMap(1, 3, row));
    EXPECT_EQ(joint.p, row);
}

TEST(JointDistributionTest, MarginalsMatchBruteForce) {
    std::mt19937_64 rng(35);
    const oracle::Matrix m = oracle::random_softmax(3, 5, rng);
    const JointTable joint = joint_distribution(from(m));
    const auto pv = joint.visual_marginal();
    const auto pt = joint.text_marginal();
    double total = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
            s += m[j][i] / 3.0;
        }
        EXPECT_NEAR(pv[i], s, 1e-12);
        total += s;
    }
    for (double p : pt) {
        EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
}

TEST(MutualInformationTest, IndependenceGivesZero) {
    const MIEstimate mi = mutual_information(AttentionMap(3, 4, std::vector<double>(12, 0.25)));
    EXPECT_EQ(mi.raw_nats, 0.0);
    EXPECT_EQ(mi.normalized, 0.0);
}

TEST(MutualInformationTest, DeterministicDiagonal) {
    const MIEstimate mi = mutual_information(AttentionMap(2, 2, {1.0, 0.0, 0.0, 1.0}));
    EXPECT_NEAR(mi.raw_nats, std::log(2.0), 1e-15);
    EXPECT_NEAR(mi.normalized, 1.0, 1e-15);
}

TEST(MutualInformationTest, SingleTextTokenNormalizesToZero) {
    const MIEstimate mi = mutual_information(AttentionMap(1, 3, {0.2, 0.3, 0.5}));
    EXPECT_EQ(mi.raw_nats, 0.0);
    EXPECT_EQ(mi.normalized, 0.0);
}

TEST(MutualInformationTest, MatchesBruteForceDoubleSum) {
    std::mt19937_64 rng(816);
    const oracle::Matrix m = oracle::random_softmax(8, 16, rng, 1.5);
    const MIEstimate mi = mutual_information(from(m));
    EXPECT_NEAR(mi.raw_nats, oracle::brute_force_mi(m), 1e-12);
    EXPECT_NEAR(mi.normalized, mi.raw_nats / std::log(8.0), 1e-15);
}

TEST(MutualInformationTest, Properties) {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t nt = 1 + rng() % 12;
        const std::size_t nv = 1 + rng() % 40;
        oracle::Matrix m = oracle::random_softmax(nt, nv, rng, 0.5 + (rng() % 4));
        const AttentionMap attn = from(m);
        const MIEstimate mi = mutual_information(attn);
        EXPECT_GE(mi.raw_nats, 0.0);
        EXPECT_LE(mi.raw_nats, std::log(static_cast<double>(nt)) + 1e-9);
        EXPECT_GE(mi.normalized, 0.0);
        EXPECT_LE(mi.normalized, 1.0);

        // Column permutation invariance.
        std::vector<std::size_t> perm(nv);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        oracle::Matrix permuted = m;
        for (std::size_t j = 0; j < nt; ++j) {
            for (std::size_t i = 0; i < nv; ++i) {
                permuted[j][i] = m[j][perm[i]];
            }
        }
        EXPECT_NEAR(mutual_information(from(permuted)).raw_nats, mi.raw_nats, 1e-12);

        // Identical rows carry no information about the text token.
        oracle::Matrix same(nt, m.front());
        EXPECT_NEAR(mutual_information(from(same)).raw_nats, 0.0, 1e-9);

        // Determinism.
        const MIEstimate again = mutual_information(attn);
        EXPECT_EQ(std::memcmp(&again.raw_nats, &mi.raw_nats, sizeof(double)), 0);
    }
}

TEST(MutualInformationTest, ZeroCellsContributeNothing) {
    // Sparse rows: the log term is skipped rather than producing NaN.
    const MIEstimate mi = mutual_information(AttentionMap(2, 3, {0.5, 0.5, 0.0, 0.0, 0.5, 0.5}));
    EXPECT_TRUE(std::isfinite(mi.raw_nats));
    EXPECT_NEAR(mi.raw_nats, oracle::brute_force_mi({{0.5, 0.5, 0.0}, {0.0, 0.5, 0.5}}), 1e-15);
}

TEST(TextMaskTest, MaskedRowsAreDropped) {
    const AttentionMap attn(3, 2, {1.0, 0.0, 0.0, 1.0, 0.5, 0.5});
    const AttentionMap kept = select_text_rows(attn, {true, true, false});
    EXPECT_EQ(kept.n_text(), 2u);
    EXPECT_NEAR(mutual_information(kept).raw_nats, std::log(2.0), 1e-15);
    EXPECT_THROW(select_text_rows(attn, {false, false, false}), usage_error);
    EXPECT_THROW(select_text_rows(attn, {true}), usage_error);
    EXPECT_EQ(select_text_rows(attn, {}), attn);
}

}  // namespace
}  // namespace tokprune
