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

#include "flowlens/contrastive.hpp"
#include "flowlens/evaluation.hpp"
#include "gradcheck_suite.hpp"
#include "oracles.hpp"

using namespace flowlens;
using testkit::random_tokens;

namespace {

std::vector<std::vector<double>> rows_of(const ad::Tensor<double>& t) {
    const std::size_t n = t.shape()[0], d = t.shape()[1];
    std::vector<std::vector<double>> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i].assign(t.values().begin() + static_cast<std::ptrdiff_t>(i * d),
                      t.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    }
    return out;
}

ad::Tensor<double> tensor_of(const std::vector<std::vector<double>>& rows) {
    std::vector<double> flat;
    for (const auto& r : rows) {
        flat.insert(flat.end(), r.begin(), r.end());
    }
    return ad::Tensor<double>::from({rows.size(), rows[0].size()}, flat);
}

double loss(const std::vector<std::vector<double>>& z, const std::vector<std::vector<double>>& zt, double tau = 0.5) {
    return nt_xent(tensor_of(z), tensor_of(zt), tau).item();
}

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 16;
    c.n_heads = 2;
    c.d_header = 4;
    c.ff_width = 32;
    c.proj_hidden = 16;
    c.proj_dim = 8;
    c.cls_hidden = 8;
    c.init_std = 0.1;
    return c;
}

/// Two classes of token sequences that differ in their flag pattern.
std::vector<TokenizedSequence> toy_tokens(std::size_t n, Rng& rng, std::vector<std::int32_t>* labels) {
    std::vector<TokenizedSequence> out;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(i % 2);
        auto t = random_tokens(2 + rng.below(8), rng);
        for (auto& f : t.flags) {
            f = y ? 0x02 : 0x18;
        }
        for (auto& l : t.length) {
            l = y ? 0.01 : 0.5 + 0.1 * rng.uniform();
        }
        out.push_back(std::move(t));
        if (labels) {
            labels->push_back(y);
        }
    }
    return out;
}

}  // namespace

TEST(NtXent, SinglePairIsZero) {
    EXPECT_NEAR(loss({{1.0, 2.0, -1.0}}, {{0.3, -4.0, 2.0}}), 0.0, 1e-15);
}

TEST(NtXent, OrthogonalHandCase) {
    const double want = std::log(1.0 + 2.0 * std::exp(-2.0));
    EXPECT_NEAR(loss({{1, 0}, {0, 1}}, {{1, 0}, {0, 1}}), want, 1e-12);
    EXPECT_NEAR(want, 0.23955, 1e-5);
}

TEST(NtXent, MatchesDirectSummation) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(16), d = 1 + rng.below(8);
        auto z = testkit::random_tensor({n, d}, rng, 1.0, false);
        auto zt = testkit::random_tensor({n, d}, rng, 1.0, false);
        const double tau = 0.1 + rng.uniform();
        const double got = nt_xent(z, zt, tau).item();
        EXPECT_NEAR(got, oracle::nt_xent(rows_of(z), rows_of(zt), tau), 1e-10 * std::max(1.0, std::abs(got)));
    }
}

TEST(NtXent, SymmetryPermutationAndScaleInvariance) {
    Rng rng(2);
    auto z = rows_of(testkit::random_tensor({6, 4}, rng, 1.0, false));
    auto zt = rows_of(testkit::random_tensor({6, 4}, rng, 1.0, false));
    const double base = loss(z, zt);
    EXPECT_NEAR(loss(zt, z), base, 1e-12);
    std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    std::vector<std::vector<double>> pz, pzt;
    for (auto i : perm) {
        pz.push_back(z[i]);
        pzt.push_back(zt[i]);
    }
    EXPECT_NEAR(loss(pz, pzt), base, 1e-12);
    for (std::size_t i = 0; i < z.size(); ++i) {
        for (auto& v : z[i]) {
            v *= 0.1 + static_cast<double>(i);
        }
    }
    EXPECT_NEAR(loss(z, zt), base, 1e-12);
}

TEST(NtXent, RejectsBadInput) {
    auto a = ad::Tensor<double>::zeros({2, 3});
    auto b = ad::Tensor<double>::zeros({3, 3});
    EXPECT_THROW((void)nt_xent(a, b, 0.5), ad::ShapeError);
    auto c = ad::Tensor<double>::full({2, 3}, 1.0);
    EXPECT_THROW((void)nt_xent(c, c, 0.0), std::invalid_argument);
}

TEST(AugmentMix, PatchLengthRule) {
    EXPECT_EQ(patch_length(32, 0.4), 13u);
    EXPECT_EQ(patch_length(1, 0.4), 1u);
    EXPECT_EQ(patch_length(2, 0.01), 1u);
    EXPECT_EQ(patch_length(10, 0.0), 0u);
    EXPECT_THROW((void)patch_length(5, 1.0), std::invalid_argument);
}

TEST(AugmentMix, ZeroLambdaIsIdentity) {
    Rng rng(3);
    const auto x = random_tokens(10, rng), u = random_tokens(10, rng);
    const auto y = augment_mix(x, u, 0.0, rng);
    EXPECT_EQ(y.flags, x.flags);
    EXPECT_EQ(y.length, x.length);
}

TEST(AugmentMix, ExactlyOneContiguousPatchFromDonor) {
    Rng rng(4);
    const auto x = random_tokens(32, rng), u = random_tokens(32, rng);
    std::vector<int> counts(20, 0);
    for (int draw = 0; draw < 10000; ++draw) {
        Patch p;
        const auto y = augment_mix(x, u, 0.4, rng, &p);
        ASSERT_EQ(p.length, 13u);
        ASSERT_LE(p.start, 19u);
        counts[p.start] += 1;
        for (std::size_t j = 0; j < 32; ++j) {
            const bool in = j >= p.start && j < p.start + p.length;
            ASSERT_EQ(y.length[j], in ? u.length[j] : x.length[j]);
            ASSERT_EQ(y.flags[j], in ? u.flags[j] : x.flags[j]);
        }
    }
    double chi2 = 0.0;
    for (int c : counts) {
        chi2 += (c - 500.0) * (c - 500.0) / 500.0;
    }
    EXPECT_LT(chi2, 43.82);  // 19 degrees of freedom, p = 0.001
}

TEST(AugmentMix, LengthMismatchRejected) {
    Rng rng(5);
    EXPECT_THROW((void)augment_mix(random_tokens(3, rng), random_tokens(4, rng), 0.4, rng), std::invalid_argument);
}

TEST(DonorPool, NeverSelfUnlessAlone) {
    Rng rng(6);
    std::vector<TokenizedSequence> pool = {random_tokens(3, rng), random_tokens(3, rng), random_tokens(5, rng)};
    const DonorPool dp(pool);
    for (int i = 0; i < 100; ++i) {
        bool fb = false;
        EXPECT_EQ(dp.draw(0, 3, rng, &fb), 1u);
        EXPECT_FALSE(fb);
    }
    bool fb = false;
    (void)dp.draw(2, 5, rng, &fb);
    EXPECT_TRUE(fb);
}

TEST(Scarf, ReplacesExactCountFromMarginals) {
    Rng rng(7);
    std::vector<FeatureRow> rows(50);
    for (auto& r : rows) {
        for (auto& v : r) {
            v = std::floor(rng.uniform() * 5.0);
        }
    }
    std::vector<const FeatureRow*> ptrs;
    for (const auto& r : rows) {
        ptrs.push_back(&r);
    }
    const MarginalTable m(ptrs);
    FeatureRow x;
    x.fill(-1.0);
    EXPECT_EQ(scarf_augment(x, m, 0.0, rng), x);
    for (int t = 0; t < 200; ++t) {
        std::vector<std::size_t> idx;
        const auto y = scarf_augment(x, m, 0.4, rng, &idx);
        ASSERT_EQ(idx.size(), 17u);
        ASSERT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 17u);
        std::size_t changed = 0;
        for (std::size_t k = 0; k < kNetFlowFeatures; ++k) {
            if (y[k] != x[k]) {
                ++changed;
                const auto col = m.column(k);
                ASSERT_NE(std::find(col.begin(), col.end(), y[k]), col.end());
            }
        }
        ASSERT_EQ(changed, 17u);
    }
}

TEST(EarlyStopper, PatienceThree) {
    EarlyStopper s(3);
    const std::vector<double> errs = {0.2, 0.3, 0.3, 0.3};
    std::size_t stopped = 0;
    for (std::size_t e = 1; e <= errs.size(); ++e) {
        s.update(e, errs[e - 1]);
        if (s.should_stop()) {
            stopped = e;
            break;
        }
    }
    EXPECT_EQ(stopped, 4u);
    EXPECT_EQ(s.best_epoch(), 1u);
    EXPECT_DOUBLE_EQ(s.best_error(), 0.2);
}

TEST(EarlyStopper, EqualErrorDoesNotReset) {
    EarlyStopper s(2);
    s.update(1, 0.5);
    s.update(2, 0.5);
    EXPECT_FALSE(s.should_stop());
    s.update(3, 0.5);
    EXPECT_TRUE(s.should_stop());
}

TEST(EarlyStopper, LowerLossBreaksErrorTie) {
    EarlyStopper s(2);
    EXPECT_TRUE(s.update(1, 0.5, 0.70));
    EXPECT_TRUE(s.update(2, 0.5, 0.60));
    EXPECT_FALSE(s.update(3, 0.5, 0.65));
    EXPECT_FALSE(s.update(4, 0.6, 0.10));
    EXPECT_TRUE(s.should_stop());
    EXPECT_EQ(s.best_epoch(), 2u);
}

TEST(StratifiedSplit, KeepsBothClassesOnBothSides) {
    std::vector<std::int32_t> y(100, 0);
    for (int i = 0; i < 10; ++i) {
        y[i] = 1;
    }
    Rng rng(8);
    const auto s = stratified_split(y, 0.2, rng);
    EXPECT_EQ(s.validation.size(), 20u);
    EXPECT_EQ(s.train.size(), 80u);
    int vpos = 0;
    for (auto i : s.validation) {
        vpos += y[i];
    }
    EXPECT_EQ(vpos, 2);
}

TEST(ZScore, ConstantColumnMapsToZero) {
    FeatureRow a{}, b{};
    a[0] = 3.0;
    b[0] = 3.0;
    a[1] = 1.0;
    b[1] = 3.0;
    const std::vector<const FeatureRow*> ptrs = {&a, &b};
    const auto z = ZScore::fit(ptrs);
    EXPECT_EQ(z.apply(0, 3.0), 0.0);
    EXPECT_EQ(z.apply(0, 100.0), 0.0);
    EXPECT_DOUBLE_EQ(z.apply(1, 3.0), 1.0);
}

TEST(ZScore, HeavyTailsStayBounded) {
    std::vector<FeatureRow> rows(100);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        rows[i][0] = 1000.0 + static_cast<double>(i);
    }
    std::vector<const FeatureRow*> ptrs;
    for (const auto& r : rows) {
        ptrs.push_back(&r);
    }
    const auto z = ZScore::fit(ptrs);
    EXPECT_LT(z.apply(0, 1050.0), z.apply(0, 1e9));
    EXPECT_LT(z.apply(0, 1e9), 1000.0);
    EXPECT_DOUBLE_EQ(ZScore::compress(-3.0), -std::log1p(3.0));
}

TEST(Finetune, SingleClassRejected) {
    Rng rng(9);
    auto model = make_transformer_model<double>(small_config(), rng);
    std::vector<TokenizedSequence> items = {random_tokens(2, rng), random_tokens(3, rng)};
    const std::vector<std::int32_t> y = {0, 0};
    EXPECT_THROW(finetune(model, std::span<const TokenizedSequence>(items), y, TrainConfig{}, rng),
                 std::invalid_argument);
}

TEST(Finetune, TransformerSeparatesToyClasses) {
    Rng rng(10);
    std::vector<std::int32_t> y, ty;
    const auto items = toy_tokens(80, rng, &y);
    const auto test = toy_tokens(40, rng, &ty);
    auto model = make_transformer_model<double>(small_config(), rng);
    TrainConfig cfg;
    cfg.finetune_lr = 1e-3;
    cfg.finetune_max_epochs = 15;
    const auto rep = finetune(model, std::span<const TokenizedSequence>(items), y, cfg, rng);
    EXPECT_GE(rep.epochs_run, 1u);
    EXPECT_EQ(rep.train_size + rep.validation_size, 80u);
    const auto p = predict_malicious(model, std::span<const TokenizedSequence>(test));
    EXPECT_GT(auc_roc(p, ty).auc, 0.99);
}

TEST(Finetune, BaselineSeparatesToyClasses) {
    Rng rng(11);
    std::vector<FeatureRow> rows;
    std::vector<std::int32_t> y;
    for (int i = 0; i < 100; ++i) {
        FeatureRow r{};
        for (auto& v : r) {
            v = 1000.0 * rng.uniform();
        }
        r[5] = (i % 2) ? 40.0 + rng.uniform() : 900.0 + rng.uniform();
        rows.push_back(r);
        y.push_back(i % 2);
    }
    DnnConfig dc;
    dc.width = 32;
    dc.proj_hidden = 16;
    dc.proj_dim = 8;
    dc.cls_hidden = 8;
    auto model = make_dnn_model<double>(dc, rng);
    TrainConfig cfg;
    cfg.finetune_lr = 1e-2;
    cfg.finetune_max_epochs = 20;
    (void)finetune_baseline(model, std::span<const FeatureRow>(rows), y, cfg, rng, true);
    const auto p = predict_malicious(model, std::span<const FeatureRow>(rows));
    EXPECT_GT(auc_roc(p, y).auc, 0.95);
}

TEST(Pretrain, ZeroLambdaGivesFiniteLoss) {
    Rng rng(12);
    auto model = make_transformer_model<double>(small_config(), rng);
    const auto data = toy_tokens(24, rng, nullptr);
    TrainConfig cfg;
    cfg.lambda = 0.0;
    cfg.batch_size = 8;
    const auto rep = pretrain(model, std::span<const TokenizedSequence>(data), cfg, rng);
    EXPECT_EQ(rep.steps, 3u);
    for (double l : rep.losses) {
        EXPECT_TRUE(std::isfinite(l));
    }
}

TEST(Pretrain, DeterministicForSeed) {
    Rng gen(13);
    const auto data = toy_tokens(32, gen, nullptr);
    TrainConfig cfg;
    cfg.batch_size = 8;
    auto run = [&] {
        Rng rng(99);
        auto model = make_transformer_model<double>(small_config(), rng);
        const auto rep = pretrain(model, std::span<const TokenizedSequence>(data), cfg, rng);
        return std::make_pair(rep.losses, nn::snapshot(model.named_parameters()));
    };
    const auto a = run(), b = run();
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(a.second, b.second);
}

TEST(Pretrain, LossDecreases) {
    Rng rng(14);
    auto model = make_transformer_model<double>(small_config(), rng);
    std::vector<TokenizedSequence> data;
    for (int i = 0; i < 64; ++i) {
        data.push_back(random_tokens(8, rng));
    }
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.lr = 2e-3;
    cfg.pretrain_epochs = 12;
    const auto rep = pretrain(model, std::span<const TokenizedSequence>(data), cfg, rng);
    ASSERT_EQ(rep.losses.size(), 48u);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 8; ++i) {
        first += rep.losses[i];
        last += rep.losses[rep.losses.size() - 1 - i];
    }
    EXPECT_LT(last, first);
    EXPECT_EQ(rep.skipped_steps, 0u);
}

TEST(Pretrain, BaselinePretrainRuns) {
    Rng rng(15);
    std::vector<FeatureRow> rows(40);
    for (auto& r : rows) {
        for (auto& v : r) {
            v = rng.normal();
        }
    }
    DnnConfig dc;
    dc.width = 16;
    dc.proj_hidden = 16;
    dc.proj_dim = 8;
    dc.cls_hidden = 8;
    auto model = make_dnn_model<double>(dc, rng);
    TrainConfig cfg;
    cfg.batch_size = 10;
    const auto rep = pretrain(model, std::span<const FeatureRow>(rows), cfg, rng);
    EXPECT_EQ(rep.steps, 4u);
    EXPECT_EQ(rep.fallback_pairs, 0u);
}

TEST(Model, CloneIsDeepAndEqual) {
    Rng rng(16);
    auto model = make_transformer_model<double>(small_config(), rng);
    auto copy = model.clone();
    EXPECT_EQ(nn::snapshot(model.named_parameters()), nn::snapshot(copy.named_parameters()));
    copy.named_parameters()[0].tensor.mutable_values()[0] += 1.0;
    EXPECT_NE(nn::snapshot(model.named_parameters()), nn::snapshot(copy.named_parameters()));
}

TEST(TrainConfig, ValidationAndJson) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
    c.lambda = 1.0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}
