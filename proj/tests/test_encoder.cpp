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

#include "flowlens/contrastive.hpp"
#include "flowlens/encoder.hpp"
#include "gradcheck_suite.hpp"

using namespace flowlens;
using testkit::random_tokens;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_header = 8;
    c.ff_width = 64;
    c.proj_hidden = 32;
    c.proj_dim = 16;
    c.cls_hidden = 16;
    c.init_std = 0.2;
    return c;
}

std::vector<TokenizedSequence> random_batch(Rng& rng, std::size_t n) {
    std::vector<TokenizedSequence> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(random_tokens(1 + rng.below(32), rng));
    }
    return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

}  // namespace

TEST(ModelConfig, DefaultsAndValidation) {
    ModelConfig c;
    EXPECT_EQ(c.n_layers, 4u);
    EXPECT_EQ(c.d_model, 256u);
    EXPECT_EQ(c.n_heads, 4u);
    EXPECT_EQ(c.head_dim(), 64u);
    EXPECT_EQ(c.ff_width, 1024u);
    EXPECT_DOUBLE_EQ(c.dropout, 0.1);
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_EQ(ModelConfig::from_json(ModelConfig{}.to_json()).to_json(), ModelConfig{}.to_json());
}

TEST(CategoricalRow, SentinelsAndRangeErrors) {
    EXPECT_EQ(categorical_row(5, 256), 5);
    EXPECT_EQ(categorical_row(kClsToken, 256), 256);
    EXPECT_EQ(categorical_row(kPadToken, 256), 257);
    EXPECT_THROW(categorical_row(256, 256), std::out_of_range);
    EXPECT_THROW(categorical_row(-1, 2), std::out_of_range);
}

TEST(EmbedPackets, PositionalAdditivity) {
    Rng rng(1);
    TransformerEncoder<double> enc(small_config(), rng);
    TokenizedSequence t = random_tokens(1, rng);
    t = {{t.protocol[0], t.protocol[0]}, {t.flags[0], t.flags[0]}, {t.direction[0], t.direction[0]},
         {t.length[0], t.length[0]}, {t.iat[0], t.iat[0]}};
    const std::vector<TokenizedSequence> seqs = {t};
    const auto e = enc.embed_packets(pad_batch(seqs));
    const std::size_t d = 32;
    const auto pos = enc.positions().values();
    for (std::size_t c = 0; c < d; ++c) {
        EXPECT_NEAR(e.at(d + c) - e.at(2 * d + c), pos[d + c] - pos[2 * d + c], 1e-14);
    }
}

TEST(EmbedPackets, ZeroNumericChannelsGiveBias) {
    Rng rng(2);
    TransformerEncoder<double> enc(small_config(), rng);
    // Give the biases non-trivial values first.
    for (auto& v : enc.length_projection().bias.node()->value) {
        v = rng.normal();
    }
    TokenizedSequence t = random_tokens(2, rng);
    t.length = {0.0, 0.0};
    t.iat = {0.0, 0.0};
    const std::vector<TokenizedSequence> seqs = {t};
    const auto h = enc.header_embeddings(pad_batch(seqs));
    const auto bias = enc.length_projection().bias.values();
    const auto ibias = enc.iat_projection().bias.values();
    for (std::size_t pos = 1; pos < 3; ++pos) {
        for (std::size_t c = 0; c < 8; ++c) {
            EXPECT_EQ(h.length.at(pos * 8 + c), bias[c]);
            EXPECT_EQ(h.iat.at(pos * 8 + c), ibias[c]);
        }
    }
}

TEST(EmbedPackets, FullSizeShapeContract) {
    Rng rng(3);
    TransformerEncoder<double> enc(ModelConfig{}, rng);
    auto seqs = random_batch(rng, 3);
    const auto b = pad_batch(seqs);
    const auto e = enc.embed_packets(b);
    EXPECT_EQ(e.shape(), (ad::Shape{3, b.width, 256}));
    Rng r(0);
    EXPECT_EQ(enc.encode(b, false, r).shape(), (ad::Shape{3, 256}));
}

TEST(Attention, SingleUnpaddedKeyReturnsItsValue) {
    Rng rng(4);
    auto q = testkit::random_tensor({1, 1, 3, 4}, rng, 1.0, false);
    auto k = testkit::random_tensor({1, 1, 3, 4}, rng, 1.0, false);
    auto v = testkit::random_tensor({1, 1, 3, 4}, rng, 1.0, false);
    const std::vector<std::uint8_t> mask = {0, 1, 0};
    const auto out = attention(q, k, v, mask);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            EXPECT_NEAR(out.at(r * 4 + c), v.at(4 + c), 1e-15);
        }
    }
}

TEST(Attention, UniformScoresAverageUnpaddedValues) {
    Rng rng(5);
    auto q = ad::Tensor<double>::zeros({1, 1, 4, 3});
    auto k = testkit::random_tensor({1, 1, 4, 3}, rng, 1.0, false);
    auto v = testkit::random_tensor({1, 1, 4, 3}, rng, 1.0, false);
    const std::vector<std::uint8_t> mask = {1, 1, 1, 0};
    const auto out = attention(q, k, v, mask);
    for (std::size_t c = 0; c < 3; ++c) {
        const double mean = (v.at(c) + v.at(3 + c) + v.at(6 + c)) / 3.0;
        EXPECT_NEAR(out.at(c), mean, 1e-14);
    }
}

TEST(Attention, PaddedValuesHaveNoEffect) {
    Rng rng(6);
    auto q = testkit::random_tensor({2, 2, 5, 4}, rng, 1.0, false);
    auto k = testkit::random_tensor({2, 2, 5, 4}, rng, 1.0, false);
    auto v = testkit::random_tensor({2, 2, 5, 4}, rng, 1.0, false);
    const std::vector<std::uint8_t> mask = {1, 1, 1, 0, 0, 1, 1, 1, 1, 0};
    const auto before = attention(q, k, v, mask);
    auto v2 = v.detach();
    auto vals = v2.mutable_values();
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t w = 0; w < 5; ++w) {
                if (!mask[b * 5 + w]) {
                    for (std::size_t c = 0; c < 4; ++c) {
                        vals[((b * 2 + h) * 5 + w) * 4 + c] = 1e6 * rng.normal();
                    }
                }
            }
        }
    }
    const auto after = attention(q, k, v2, mask);
    EXPECT_EQ(max_abs_diff(before.values(), after.values()), 0.0);
}

TEST(Attention, RowsAreStochasticOverUnpaddedKeys) {
    // With V = I-like one-hot columns, each output row is the attention row.
    Rng rng(7);
    const std::size_t w = 6;
    auto q = testkit::random_tensor({1, 1, w, w}, rng, 2.0, false);
    auto k = testkit::random_tensor({1, 1, w, w}, rng, 2.0, false);
    std::vector<double> eye(w * w, 0.0);
    for (std::size_t i = 0; i < w; ++i) {
        eye[i * w + i] = 1.0;
    }
    auto v = ad::Tensor<double>::from({1, 1, w, w}, eye);
    const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 0, 1};
    const auto a = attention(q, k, v, mask);
    for (std::size_t r = 0; r < w; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < w; ++c) {
            s += a.at(r * w + c);
            if (!mask[c]) {
                EXPECT_EQ(a.at(r * w + c), 0.0);
            }
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Encode, EvalModeIsDeterministic) {
    Rng rng(8);
    TransformerEncoder<double> enc(small_config(), rng);
    const auto seqs = random_batch(rng, 5);
    Rng r1(1), r2(2);
    const auto a = enc.encode(pad_batch(seqs), false, r1);
    const auto b = enc.encode(pad_batch(seqs), false, r2);
    EXPECT_EQ(max_abs_diff(a.values(), b.values()), 0.0);
}

TEST(Encode, TrainModeUsesDropout) {
    Rng rng(8);
    TransformerEncoder<double> enc(small_config(), rng);
    const auto seqs = random_batch(rng, 5);
    Rng r1(1), r2(2);
    const auto a = enc.encode(pad_batch(seqs), true, r1);
    const auto b = enc.encode(pad_batch(seqs), true, r2);
    EXPECT_GT(max_abs_diff(a.values(), b.values()), 0.0);
}

TEST(Encode, BatchPermutationPermutesOutputs) {
    Rng rng(9);
    TransformerEncoder<double> enc(small_config(), rng);
    const auto seqs = random_batch(rng, 6);
    std::vector<TokenizedSequence> rev(seqs.rbegin(), seqs.rend());
    Rng r(0);
    const auto a = enc.encode(pad_batch(seqs), false, r);
    const auto b = enc.encode(pad_batch(rev), false, r);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t c = 0; c < 32; ++c) {
            EXPECT_NEAR(a.at(i * 32 + c), b.at((5 - i) * 32 + c), 1e-12);
        }
    }
}

TEST(Encode, PaddingInvariance) {
    for (auto cfg : {small_config(), ModelConfig{}}) {
        Rng rng(10);
        TransformerEncoder<double> enc(cfg, rng);
        const auto seqs = random_batch(rng, 4);
        Rng r(0);
        const auto base = enc.encode(pad_batch(seqs), false, r);
        const auto wide = enc.encode(pad_batch(seqs, 33), false, r);
        EXPECT_LT(max_abs_diff(base.values(), wide.values()), 1e-10);
        // Each sample alone (tightest padding) agrees too.
        for (std::size_t i = 0; i < seqs.size(); ++i) {
            const std::vector<TokenizedSequence> one = {seqs[i]};
            const auto solo = enc.encode(pad_batch(one), false, r);
            EXPECT_LT(max_abs_diff(solo.values(), base.values().subspan(i * cfg.d_model, cfg.d_model)), 1e-10);
        }
    }
}

TEST(Encode, ChunkedEncodingMatchesSingleBatch) {
    Rng rng(11);
    TransformerEncoder<double> enc(small_config(), rng);
    const auto seqs = random_batch(rng, 70);
    std::vector<const TokenizedSequence*> ptrs;
    for (const auto& s : seqs) {
        ptrs.push_back(&s);
    }
    Rng r(0);
    const auto whole = enc.encode(pad_batch(seqs), false, r);
    const auto chunked = enc.encode_items(ptrs, false, r, 16);
    EXPECT_LT(max_abs_diff(whole.values(), chunked.values()), 1e-10);
}

TEST(Encode, PositionSensitive) {
    Rng rng(12);
    TransformerEncoder<double> enc(small_config(), rng);
    auto t = random_tokens(4, rng);
    t.length[1] = 0.9;
    t.length[2] = 0.1;
    auto s = t;
    std::swap(s.protocol[1], s.protocol[2]);
    std::swap(s.flags[1], s.flags[2]);
    std::swap(s.direction[1], s.direction[2]);
    std::swap(s.length[1], s.length[2]);
    std::swap(s.iat[1], s.iat[2]);
    const std::vector<TokenizedSequence> seqs = {t, s};
    Rng r(0);
    const auto out = enc.encode(pad_batch(seqs), false, r);
    EXPECT_GT(max_abs_diff(out.values().subspan(0, 32), out.values().subspan(32, 32)), 1e-6);
}

TEST(Encode, UnknownCategoricalIdRejected) {
    Rng rng(13);
    TransformerEncoder<double> enc(small_config(), rng);
    auto t = random_tokens(2, rng);
    t.flags[0] = 300;
    const std::vector<TokenizedSequence> seqs = {t};
    Rng r(0);
    EXPECT_THROW((void)enc.encode(pad_batch(seqs), false, r), std::out_of_range);
}

TEST(Encode, FloatTracksDouble) {
    Rng rng_d(14), rng_f(14);
    TransformerEncoder<double> ed(small_config(), rng_d);
    TransformerEncoder<float> ef(small_config(), rng_f);
    Rng gen(15);
    const auto seqs = random_batch(gen, 4);
    Rng r(0);
    const auto a = ed.encode(pad_batch(seqs), false, r);
    const auto b = ef.encode(pad_batch(seqs), false, r);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        EXPECT_NEAR(a.at(i), b.at(i), 1e-3);
    }
}

TEST(FullModel, GradientMatchesFiniteDifferences) {
    const auto r = testkit::full_model_gradcheck();
    EXPECT_GT(r.checked, 500u);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Heads, ProjectionShapeAndZeroInput) {
    Rng rng(16);
    auto m = make_transformer_model<double>(ModelConfig{}, rng);
    for (auto* t : {&m.projection.hidden.bias, &m.projection.output.bias}) {
        for (auto& v : t->node()->value) {
            v = rng.normal();
        }
    }
    const auto z = m.projection(ad::Tensor<double>::zeros({3, 256}));
    EXPECT_EQ(z.shape(), (ad::Shape{3, 128}));
    for (std::size_t c = 0; c < 128; ++c) {
        EXPECT_EQ(z.at(c), z.at(128 + c));
        EXPECT_EQ(z.at(c), z.at(256 + c));
    }
    EXPECT_EQ(m.classifier(ad::Tensor<double>::zeros({5, 256})).shape(), (ad::Shape{5, 2}));
}

TEST(Heads, EqualLogitsGiveHalf) {
    auto p = ad::softmax(ad::Tensor<double>::from({1, 2}, {0.7, 0.7}));
    EXPECT_DOUBLE_EQ(p.at(1), 0.5);
}

TEST(Heads, ClassifierFitsSeparableToyWithin200Steps) {
    Rng rng(17);
    nn::MlpHead<double> head(8, 16, 2, 0.1, rng);
    std::vector<double> xs;
    std::vector<std::int32_t> ys;
    for (int i = 0; i < 64; ++i) {
        const int y = i % 2;
        for (int c = 0; c < 8; ++c) {
            xs.push_back((y ? 1.0 : -1.0) * (c == 0 ? 1.0 : 0.0) + 0.3 * rng.normal());
        }
        ys.push_back(y);
    }
    const auto x = ad::Tensor<double>::from({64, 8}, xs);
    std::vector<ad::Tensor<double>> params = {head.hidden.weight, head.hidden.bias, head.output.weight,
                                              head.output.bias};
    ad::AdamWConfig oc;
    oc.lr = 1e-2;
    ad::AdamW<double> opt(params, oc);
    int reached = -1;
    for (int step = 1; step <= 200; ++step) {
        opt.zero_grad();
        auto logits = head(x);
        int correct = 0;
        for (int i = 0; i < 64; ++i) {
            correct += (logits.at(2 * i + 1) > logits.at(2 * i)) == (ys[i] == 1);
        }
        if (correct == 64) {
            reached = step;
            break;
        }
        ad::backward(ad::cross_entropy(logits, ys));
        opt.step();
    }
    EXPECT_GT(reached, 0);
}
