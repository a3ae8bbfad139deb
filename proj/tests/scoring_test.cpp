// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#include "laserkv/scoring.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "test_util.hpp"

namespace laserkv {
namespace {

// Dense reference: full T x T causal attention per (layer, head) in long double, then the
// requested rows and columns are gathered. Shares no code with exact_scores.
std::vector<long double> dense_reference(const KvTrace& trace, const std::vector<std::size_t>& cands,
                                         const std::vector<std::size_t>& rows) {
    const auto& s = trace.shape();
    std::vector<long double> out(cands.size(), 0.0L);
    for (std::size_t l = 0; l < s.num_layers; ++l) {
        for (std::size_t h = 0; h < s.num_heads; ++h) {
            for (auto q : rows) {
                std::vector<long double> w(cands.size(), 0.0L);
                long double z = 0.0L;
                for (std::size_t i = 0; i < cands.size(); ++i) {
                    if (cands[i] > q) {
                        continue;
                    }
                    long double d = 0.0L;
                    for (std::size_t j = 0; j < s.head_dim; ++j) {
                        d += (long double)trace.query(q, l, h)[j] * trace.key(cands[i], l, h)[j];
                    }
                    w[i] = std::exp(d / std::sqrt((long double)s.head_dim));
                    z += w[i];
                }
                for (std::size_t i = 0; i < cands.size(); ++i) {
                    out[i] += w[i] / z;
                }
            }
        }
    }
    return out;
}

TEST(ExactScores, SingletonSoftmax) {
    const auto trace = testing::random_trace(ModelShape{3, 2, 4}, 10, 1);
    const std::vector<std::size_t> c{2};
    const std::vector<std::size_t> q{7};
    const auto s = exact_scores(trace, c, q);
    ASSERT_EQ(s.scores.size(), 1u);
    EXPECT_DOUBLE_EQ(s.scores[0], 6.0);
}

TEST(ExactScores, IdenticalKeysTie) {
    auto trace = testing::random_trace(ModelShape{2, 2, 4}, 10, 2);
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t h = 0; h < 2; ++h) {
            std::copy(trace.key(1, l, h).begin(), trace.key(1, l, h).end(), trace.key(4, l, h).begin());
        }
    }
    const std::vector<std::size_t> c{1, 3, 4};
    const std::vector<std::size_t> q{8, 9};
    const auto s = exact_scores(trace, c, q);
    EXPECT_EQ(s.scores[0], s.scores[2]);
}

TEST(ExactScores, MatchesDenseReference) {
    const auto trace = testing::random_trace(ModelShape{2, 2, 4}, 16, 5);
    const std::vector<std::size_t> c{0, 2, 3, 5, 7, 9, 10, 12};
    const std::vector<std::size_t> q{11, 13, 15};
    const auto s = exact_scores(trace, c, q);
    const auto ref = dense_reference(trace, c, q);
    for (std::size_t i = 0; i < c.size(); ++i) {
        EXPECT_NEAR(s.scores[i], (double)ref[i], 1e-6 * std::abs((double)ref[i]));
    }
}

TEST(ExactScores, MassConservationAndCausalZero) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const ModelShape shape{1 + rng() % 3, 1 + rng() % 3, 2 + rng() % 8};
        const std::size_t T = 20 + rng() % 40;
        const auto trace = testing::random_trace(shape, T, rng());
        std::vector<std::size_t> cands;
        for (std::size_t p = 0; p < T; ++p) {
            if (rng() % 2 == 0 || p == 0) {
                cands.push_back(p);
            }
        }
        std::vector<std::size_t> rows{T / 2, T - 2, T - 1};
        const auto s = exact_scores(trace, cands, rows);
        double total = 0.0;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            ASSERT_GE(s.scores[i], 0.0);
            total += s.scores[i];
        }
        const double expected = double(shape.slots() * rows.size());
        EXPECT_NEAR(total, expected, 1e-5 * expected);

        // Candidates after every query row get exactly zero.
        std::vector<std::size_t> early_rows{T / 3};
        const auto e = exact_scores(trace, cands, early_rows);
        for (std::size_t i = 0; i < cands.size(); ++i) {
            if (cands[i] > T / 3) {
                ASSERT_EQ(e.scores[i], 0.0);
            }
        }
    }
}

TEST(ExactScores, TopOneInvariantUnderQueryScaling) {
    auto trace = testing::random_trace(ModelShape{1, 1, 8}, 32, 21);
    const std::vector<std::size_t> c{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    const std::vector<std::size_t> q{31};
    const auto before = exact_scores(trace, c, q);
    for (auto& x : trace.queries()) {
        x *= 3.5F;
    }
    const auto after = exact_scores(trace, c, q);
    auto argmax = [](const std::vector<double>& v) { return std::max_element(v.begin(), v.end()) - v.begin(); };
    EXPECT_EQ(argmax(before.scores), argmax(after.scores));
}

TEST(ExactScores, Errors) {
    const auto trace = testing::random_trace(ModelShape{1, 1, 4}, 10, 1);
    const std::vector<std::size_t> none;
    const std::vector<std::size_t> late{8, 9};
    const std::vector<std::size_t> early_row{3};
    const std::vector<std::size_t> out_of_range{12};
    auto code_of = [&](auto&& fn) {
        try {
            fn();
        } catch (const Error& e) {
            return e.code();
        }
        return ErrorCode::InvalidArgument;
    };
    EXPECT_EQ(code_of([&] { exact_scores(trace, none, early_row); }), ErrorCode::EmptyCandidates);
    EXPECT_EQ(code_of([&] { exact_scores(trace, late, early_row); }), ErrorCode::MalformedWindow);
    EXPECT_EQ(code_of([&] { exact_scores(trace, late, none); }), ErrorCode::MalformedWindow);
    EXPECT_EQ(code_of([&] { exact_scores(trace, out_of_range, late); }), ErrorCode::OutOfRange);
}

}  // namespace
}  // namespace laserkv
