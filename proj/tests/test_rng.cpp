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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "flowlens/rng.hpp"

using flowlens::Rng;

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        ASSERT_EQ(a.next_u64(), b.next_u64());
    }
}

TEST(Rng, DifferentSeedsDiffer) {
    Rng a(1), b(2);
    int equal = 0;
    for (int i = 0; i < 100; ++i) {
        equal += a.next_u64() == b.next_u64();
    }
    EXPECT_EQ(equal, 0);
}

TEST(Rng, SplitStreamsAreIndependentOfParentUse) {
    Rng parent(7);
    const Rng c1 = parent.split(3);
    parent.next_u64();
    parent.next_u64();
    Rng c2 = parent.split(3);
    Rng c1m = c1;
    for (int i = 0; i < 50; ++i) {
        ASSERT_EQ(c1m.next_u64(), c2.next_u64());
    }
    Rng s4 = parent.split(4);
    Rng s3 = parent.split(3);
    EXPECT_NE(s3.next_u64(), s4.next_u64());
}

TEST(Rng, StateRoundTrip) {
    Rng a(9);
    for (int i = 0; i < 17; ++i) {
        a.next_u64();
    }
    Rng b = Rng::from_state(a.key(), a.counter());
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformRangeAndMean) {
    Rng r(5);
    double s = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
    }
    // 5 sigma of the sample mean
    EXPECT_NEAR(s / n, 0.5, 5.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST(Rng, BelowCoversRangeUniformly) {
    Rng r(11);
    std::vector<int> counts(7, 0);
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        const auto v = r.below(7);
        ASSERT_LT(v, 7u);
        ++counts[v];
    }
    double chi2 = 0.0;
    for (int c : counts) {
        chi2 += (c - n / 7.0) * (c - n / 7.0) / (n / 7.0);
    }
    // chi-square, 6 dof, p = 0.001 critical value
    EXPECT_LT(chi2, 22.46);
    EXPECT_THROW(r.below(0), std::invalid_argument);
}

TEST(Rng, NormalMoments) {
    Rng r(3);
    const int n = 100000;
    double s = 0, ss = 0;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        s += z;
        ss += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 0.02);
    EXPECT_NEAR(ss / n, 1.0, 0.02);
}

TEST(Rng, TruncatedNormalBounded) {
    Rng r(4);
    for (int i = 0; i < 20000; ++i) {
        ASSERT_LE(std::abs(r.truncated_normal(0.02)), 0.04);
    }
}

TEST(Rng, ShuffleIsPermutation) {
    Rng r(8);
    std::vector<int> v(100);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;
    r.shuffle(w);
    EXPECT_NE(v, w);
    std::sort(w.begin(), w.end());
    EXPECT_EQ(v, w);
}
