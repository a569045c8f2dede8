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

#include "flowlens/rng.hpp"
#include "flowlens/tokenize.hpp"

using namespace flowlens;

namespace {

FlowSequence flow_of(std::size_t n, Rng& rng) {
    FlowSequence f;
    for (std::size_t i = 0; i < n; ++i) {
        f.packets.push_back({static_cast<std::uint8_t>(rng.below(256)), static_cast<std::uint32_t>(rng.below(70000)),
                             static_cast<std::uint8_t>(rng.below(256)), i == 0 ? 0.0 : rng.uniform() * 200.0,
                             rng.uniform() < 0.5 ? Direction::kForward : Direction::kBackward});
    }
    return f;
}

}  // namespace

TEST(Tokenize, SynPacketMapping) {
    FlowSequence f;
    f.packets.push_back({ipproto::kTcp, 60, tcpflag::kSyn, 0.0, Direction::kForward});
    const auto t = tokenize(f);
    EXPECT_EQ(t.protocol[0], 6);
    EXPECT_EQ(t.flags[0], 2);
    EXPECT_EQ(t.direction[0], 0);
    EXPECT_DOUBLE_EQ(t.length[0], 60.0 / 65535.0);
    EXPECT_EQ(t.iat[0], 0.0);
}

TEST(Tokenize, IatAtTimeoutIsOneAndClipped) {
    TokenNormalization n;
    EXPECT_DOUBLE_EQ(n.iat_value(120.0), 1.0);
    EXPECT_EQ(n.iat_value(500.0), 1.0);
    EXPECT_EQ(n.length_value(100000), 1.0);
}

TEST(Tokenize, IatStrictlyIncreasing) {
    TokenNormalization n;
    double prev = -1.0;
    for (double s = 0.0; s <= 120.0; s += 0.37) {
        const double v = n.iat_value(s);
        EXPECT_GT(v, prev);
        prev = v;
    }
    EXPECT_GT(n.iat_value(1e-6), n.iat_value(0.0));
}

TEST(Tokenize, CategoricalRoundTrip) {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const auto f = flow_of(1 + rng.below(32), rng);
        const auto t = tokenize(f);
        const auto back = detokenize_categorical(t);
        ASSERT_EQ(back.size(), f.packets.size());
        for (std::size_t k = 0; k < back.size(); ++k) {
            EXPECT_EQ(std::get<0>(back[k]), f.packets[k].protocol);
            EXPECT_EQ(std::get<1>(back[k]), f.packets[k].tcp_flags);
            EXPECT_EQ(std::get<2>(back[k]), f.packets[k].direction);
            EXPECT_TRUE(std::isfinite(t.length[k]) && t.length[k] >= 0.0 && t.length[k] <= 1.0);
            EXPECT_TRUE(std::isfinite(t.iat[k]) && t.iat[k] >= 0.0 && t.iat[k] <= 1.0);
        }
        EXPECT_EQ(tokenize(f), t);
    }
}

TEST(Tokenize, InvalidFlowsRejected) {
    EXPECT_THROW(tokenize(FlowSequence{}), std::invalid_argument);
    Rng rng(1);
    EXPECT_THROW(tokenize(flow_of(33, rng)), std::invalid_argument);
    FlowSequence f;
    f.packets.push_back({6, 60, 0, -1.0, Direction::kForward});
    EXPECT_THROW(tokenize(f), std::out_of_range);
}

TEST(PadBatch, WidthAndMask) {
    Rng rng(2);
    const std::vector<TokenizedSequence> seqs = {tokenize(flow_of(3, rng)), tokenize(flow_of(5, rng))};
    const auto b = pad_batch(seqs);
    EXPECT_EQ(b.width, 6u);
    int ones0 = 0, ones1 = 0;
    for (std::size_t c = 0; c < 6; ++c) {
        ones0 += b.mask[c];
        ones1 += b.mask[6 + c];
    }
    EXPECT_EQ(ones0, 4);
    EXPECT_EQ(ones1, 6);
    // Leading ones, then [PAD] sentinels with zero numerics.
    for (std::size_t c = 4; c < 6; ++c) {
        EXPECT_EQ(b.mask[c], 0);
        EXPECT_EQ(b.protocol[c], kPadToken);
        EXPECT_EQ(b.flags[c], kPadToken);
        EXPECT_EQ(b.length[c], 0.0);
        EXPECT_EQ(b.iat[c], 0.0);
    }
    EXPECT_EQ(b.protocol[0], kClsToken);
    EXPECT_EQ(b.protocol[1], seqs[0].protocol[0]);
}

TEST(PadBatch, FullLengthSequence) {
    Rng rng(3);
    const std::vector<TokenizedSequence> seqs = {tokenize(flow_of(32, rng))};
    EXPECT_EQ(pad_batch(seqs).width, 33u);
    EXPECT_EQ(pad_batch(seqs, 40).width, 40u);
}

TEST(PadBatch, EmptyListIsAnError) {
    EXPECT_THROW(pad_batch(std::span<const TokenizedSequence>()), std::invalid_argument);
}

TEST(Vocabulary, SentinelsOutsideValueRange) {
    EXPECT_EQ(kClsToken, 65536);
    EXPECT_EQ(kPadToken, 65537);
    EXPECT_EQ(kVocabSize, 65538);
}
