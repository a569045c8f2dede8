// Copyright 2026 The flowlens Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "flowlens/evaluation.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace flowlens;

namespace {

std::vector<double> normals(std::size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (auto& x : v) {
        x = rng.normal();
    }
    return v;
}

}  // namespace

TEST(Auc, MatchesPairCountingOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + rng.below(200);
        std::vector<double> s(n);
        std::vector<std::int32_t> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = std::round(rng.normal() * 4.0) / 4.0;  // plenty of ties
            y[i] = static_cast<std::int32_t>(rng.below(2));
        }
        y[0] = 0;
        y[1] = 1;
        EXPECT_NEAR(auc_roc(s, y).auc, oracle::auc_pairs(s, y), 1e-12);
    }
}

TEST(Auc, PerfectSeparationAndTies) {
    const std::vector<double> s = {0.1, 0.2, 0.8, 0.9};
    const std::vector<std::int32_t> y = {0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(auc_roc(s, y).auc, 1.0);
    const std::vector<double> flat = {0.5, 0.5, 0.5, 0.5};
    EXPECT_DOUBLE_EQ(auc_roc(flat, y).auc, 0.5);
    const std::vector<double> rev = {0.9, 0.8, 0.2, 0.1};
    EXPECT_DOUBLE_EQ(auc_roc(rev, y).auc, 0.0);
}

TEST(Auc, InvariantUnderMonotoneTransform) {
    Rng rng(2);
    auto s = normals(300, rng);
    std::vector<std::int32_t> y(300);
    for (auto& v : y) {
        v = static_cast<std::int32_t>(rng.below(2));
    }
    std::vector<double> t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        t[i] = std::exp(3.0 * s[i]) + 7.0;
    }
    EXPECT_DOUBLE_EQ(auc_roc(s, y).auc, auc_roc(t, y).auc);
}

TEST(Auc, RocCurveEndpoints) {
    const std::vector<double> s = {0.3, 0.1, 0.7, 0.5};
    const std::vector<std::int32_t> y = {0, 0, 1, 1};
    const auto r = auc_roc(s, y);
    ASSERT_FALSE(r.roc.empty());
    EXPECT_DOUBLE_EQ(r.roc.back().fpr, 1.0);
    EXPECT_DOUBLE_EQ(r.roc.back().tpr, 1.0);
    EXPECT_EQ(r.positives, 2u);
    EXPECT_EQ(r.negatives, 2u);
    EXPECT_NE(r.roc_csv().find("threshold,fpr,tpr"), std::string::npos);
}

TEST(Auc, LengthMismatchRejected) {
    const std::vector<double> s = {0.1};
    const std::vector<std::int32_t> y = {0, 1};
    EXPECT_THROW((void)auc_roc(s, y), std::invalid_argument);
}

TEST(AnomalyScore, MatchesExhaustiveScan) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 1 + rng.below(16), nref = 1 + rng.below(50), nq = 1 + rng.below(20);
        const auto ref = normals(d * nref, rng);
        const auto q = normals(d * nq, rng);
        const auto batch = anomaly_scores(q, ref, d, 7);
        for (std::size_t i = 0; i < nq; ++i) {
            const std::span<const double> f(q.data() + i * d, d);
            const double want = oracle::max_cosine(f, ref, d);
            EXPECT_NEAR(anomaly_score(f, ref, d), want, 1e-12);
            EXPECT_NEAR(batch[i], want, 1e-12);
        }
    }
}

TEST(AnomalyScore, SelfAndOrthogonal) {
    const std::vector<double> ref = {1, 0, 0, 0, 2, 0};
    const std::vector<double> self = {0, 5, 0};
    const std::vector<double> orth = {0, 0, 1};
    EXPECT_NEAR(anomaly_score(self, ref, 3), 1.0, 1e-15);
    EXPECT_NEAR(anomaly_score(orth, ref, 3), 0.0, 1e-15);
}

TEST(AnomalyScore, ReferenceOrderAndGrowth) {
    Rng rng(4);
    const std::size_t d = 6;
    auto ref = normals(d * 30, rng);
    const auto f = normals(d, rng);
    const double base = anomaly_score(f, ref, d);
    std::vector<double> shuffled;
    for (std::size_t r = 30; r-- > 0;) {
        shuffled.insert(shuffled.end(), ref.begin() + static_cast<std::ptrdiff_t>(r * d),
                        ref.begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
    EXPECT_EQ(anomaly_score(f, shuffled, d), base);
    const auto extra = normals(d * 10, rng);
    ref.insert(ref.end(), extra.begin(), extra.end());
    EXPECT_GE(anomaly_score(f, ref, d), base);
}

TEST(AnomalyScore, ErrorsOnBadInput) {
    const std::vector<double> ref;
    const std::vector<double> f = {1.0};
    EXPECT_THROW((void)anomaly_score(f, ref, 1), std::invalid_argument);
    const std::vector<double> zero = {0.0, 0.0};
    const std::vector<double> one = {1.0, 0.0};
    EXPECT_THROW((void)cosine_similarity(zero, one), std::invalid_argument);
}

TEST(Splits, DeterministicDisjointAndComplete) {
    Rng rng(5);
    std::vector<std::int32_t> y(1000);
    for (auto& v : y) {
        v = rng.uniform() < 0.2 ? 1 : 0;
    }
    SplitSpec spec;
    spec.seed = 3;
    const auto a = make_splits(y, spec), b = make_splits(y, spec);
    EXPECT_EQ(a.pretrain, b.pretrain);
    EXPECT_EQ(a.test, b.test);
    std::set<std::size_t> sup(a.supervised.begin(), a.supervised.end());
    for (auto i : a.pretrain) {
        EXPECT_EQ(y[i], 0);
        EXPECT_TRUE(sup.count(i));
    }
    for (auto i : a.test) {
        EXPECT_FALSE(sup.count(i));
    }
    EXPECT_EQ(a.supervised.size() + a.test.size(), y.size());
    std::size_t benign = 0;
    for (auto v : y) {
        benign += v == 0;
    }
    EXPECT_EQ(a.pretrain.size(), fraction_count(0.6, benign));
    spec.seed = 4;
    EXPECT_NE(make_splits(y, spec).pretrain, a.pretrain);
}

TEST(Fewshot, ExactCountAndStratification) {
    Rng rng(6);
    const std::size_t n = 1'000'000;
    std::vector<std::int32_t> y(n);
    for (auto& v : y) {
        v = rng.uniform() < 0.3 ? 1 : 0;
    }
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) {
        pool[i] = i;
    }
    std::size_t pos_pool = 0;
    for (auto v : y) {
        pos_pool += v;
    }
    const auto s = fewshot_sample(pool, y, 0.001, n, rng);
    ASSERT_EQ(s.size(), 1000u);
    EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 1000u);
    std::size_t pos = 0;
    for (auto i : s) {
        pos += y[i];
    }
    EXPECT_NEAR(static_cast<double>(pos), 1000.0 * static_cast<double>(pos_pool) / n, 1.0);
}

TEST(Fewshot, EveryClassRepresented) {
    std::vector<std::int32_t> y(100, 0);
    y[7] = 1;
    std::vector<std::size_t> pool(100);
    for (std::size_t i = 0; i < 100; ++i) {
        pool[i] = i;
    }
    Rng rng(7);
    const auto s = stratified_sample(pool, y, 10, rng);
    EXPECT_EQ(s.size(), 10u);
    EXPECT_NE(std::find(s.begin(), s.end(), 7u), s.end());
}

TEST(ComparisonTable, CsvLayout) {
    ComparisonTable t("shift", "train\\test", {"a", "b"}, {"x", "y"});
    EXPECT_FALSE(t.complete());
    t.set(0, 0, 0.5);
    t.set(0, 1, 0.25);
    t.set(1, 0, 1.0);
    t.set(1, 1, 0.75);
    EXPECT_TRUE(t.complete());
    EXPECT_EQ(t.to_csv(), "train\\test,x,y\na,0.5000,0.2500\nb,1.0000,0.7500\n");
    EXPECT_THROW(t.set(2, 0, 1.0), std::out_of_range);
}
