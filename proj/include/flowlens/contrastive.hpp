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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowlens/dnn.hpp"
#include "flowlens/encoder.hpp"
#include "flowlens/netflow.hpp"
#include "flowlens/nn.hpp"
#include "flowlens/ops.hpp"
#include "flowlens/optim.hpp"
#include "flowlens/rng.hpp"
#include "flowlens/tokenize.hpp"

namespace flowlens {

struct TrainConfig {
    std::size_t batch_size = 128;
    double temperature = 0.5;
    double lambda = 0.4;
    double lr = 5e-5;
    std::size_t pretrain_epochs = 1;
    std::size_t finetune_max_epochs = 30;
    std::size_t patience = 3;
    std::size_t finetune_batch_size = 16;
    double finetune_lr = 5e-5;
    double weight_decay = 0.01;
    std::optional<double> clip_norm;
    double validation_fraction = 0.2;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(temperature > 0.0)) {
            throw std::invalid_argument("TrainConfig: temperature must be > 0");
        }
        if (!(lambda >= 0.0 && lambda < 1.0)) {
            throw std::invalid_argument("TrainConfig: lambda must lie in [0, 1)");
        }
        if (batch_size < 2) {
            throw std::invalid_argument("TrainConfig: contrastive batch size must be >= 2");
        }
        if (finetune_batch_size == 0 || patience == 0) {
            throw std::invalid_argument("TrainConfig: finetune batch size and patience must be >= 1");
        }
        if (!(lr > 0.0) || !(finetune_lr > 0.0)) {
            throw std::invalid_argument("TrainConfig: learning rates must be > 0");
        }
        if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
            throw std::invalid_argument("TrainConfig: validation fraction must lie in (0, 1)");
        }
    }

    [[nodiscard]] ad::AdamWConfig pretrain_optimizer() const {
        ad::AdamWConfig c;
        c.lr = lr;
        c.weight_decay = weight_decay;
        c.clip_norm = clip_norm;
        return c;
    }

    [[nodiscard]] ad::AdamWConfig finetune_optimizer() const {
        ad::AdamWConfig c = pretrain_optimizer();
        c.lr = finetune_lr;
        return c;
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json j = {{"batch_size", batch_size},
                            {"temperature", temperature},
                            {"lambda", lambda},
                            {"lr", lr},
                            {"pretrain_epochs", pretrain_epochs},
                            {"finetune_max_epochs", finetune_max_epochs},
                            {"patience", patience},
                            {"finetune_batch_size", finetune_batch_size},
                            {"finetune_lr", finetune_lr},
                            {"weight_decay", weight_decay},
                            {"validation_fraction", validation_fraction},
                            {"seed", seed}};
        j["clip_norm"] = clip_norm ? nlohmann::json(*clip_norm) : nlohmann::json(nullptr);
        return j;
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.batch_size = j.value("batch_size", c.batch_size);
        c.temperature = j.value("temperature", c.temperature);
        c.lambda = j.value("lambda", c.lambda);
        c.lr = j.value("lr", c.lr);
        c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
        c.finetune_max_epochs = j.value("finetune_max_epochs", c.finetune_max_epochs);
        c.patience = j.value("patience", c.patience);
        c.finetune_batch_size = j.value("finetune_batch_size", c.finetune_batch_size);
        c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
        c.seed = j.value("seed", c.seed);
        if (j.contains("clip_norm") && !j["clip_norm"].is_null()) {
            c.clip_norm = j["clip_norm"].get<double>();
        }
        c.validate();
        return c;
    }
};

/// Encoder f with projection head g (pretraining) and classifier head
/// (fine-tuning).
template <class T, class Enc>
struct ContrastiveModel {
    using Scalar = T;
    using Encoder = Enc;
    using Item = typename Enc::Item;

    Enc encoder;
    nn::MlpHead<T> projection;
    nn::MlpHead<T> classifier;

    ContrastiveModel(Enc enc, std::size_t proj_hidden, std::size_t proj_dim, std::size_t cls_hidden, double init_std,
                     Rng& rng)
        : encoder(std::move(enc)),
          projection(encoder.embedding_dim(), proj_hidden, proj_dim, init_std, rng),
          classifier(encoder.embedding_dim(), cls_hidden, 2, init_std, rng) {}

    [[nodiscard]] std::vector<NamedTensor<T>> encoder_parameters() const { return encoder.named_parameters(); }

    [[nodiscard]] std::vector<NamedTensor<T>> pretrain_parameters() const {
        auto out = encoder.named_parameters();
        projection.collect("proj", out);
        return out;
    }

    [[nodiscard]] std::vector<NamedTensor<T>> finetune_parameters() const {
        auto out = encoder.named_parameters();
        classifier.collect("cls", out);
        return out;
    }

    [[nodiscard]] std::vector<NamedTensor<T>> named_parameters() const {
        auto out = encoder.named_parameters();
        projection.collect("proj", out);
        classifier.collect("cls", out);
        return out;
    }

    [[nodiscard]] ContrastiveModel clone() const {
        ContrastiveModel c = *this;
        c.encoder = encoder.clone();
        Rng scratch(0);
        c.projection = nn::MlpHead<T>(projection.hidden.in_features(), projection.hidden.out_features(),
                                      projection.output.out_features(), 0.02, scratch);
        c.classifier = nn::MlpHead<T>(classifier.hidden.in_features(), classifier.hidden.out_features(), 2, 0.02,
                                      scratch);
        auto dst = c.named_parameters();
        nn::copy_values(named_parameters(), dst);
        return c;
    }
};

template <class T>
using TransformerModel = ContrastiveModel<T, TransformerEncoder<T>>;
template <class T>
using DnnModel = ContrastiveModel<T, DnnEncoder<T>>;

template <class T>
TransformerModel<T> make_transformer_model(const ModelConfig& cfg, Rng& rng) {
    TransformerEncoder<T> enc(cfg, rng);
    return TransformerModel<T>(std::move(enc), cfg.proj_hidden, cfg.proj_dim, cfg.cls_hidden, cfg.init_std, rng);
}

template <class T>
DnnModel<T> make_dnn_model(const DnnConfig& cfg, Rng& rng) {
    DnnEncoder<T> enc(cfg, rng);
    return DnnModel<T>(std::move(enc), cfg.proj_hidden, cfg.proj_dim, cfg.cls_hidden, cfg.init_std, rng);
}

// ---------------------------------------------------------------------------
// Augmentation

/// round(lambda * L), at least 1 when lambda > 0, at most L.
inline std::size_t patch_length(std::size_t length, double lambda) {
    if (!(lambda >= 0.0 && lambda < 1.0)) {
        throw std::invalid_argument("patch_length: lambda must lie in [0, 1)");
    }
    if (lambda == 0.0 || length == 0) {
        return 0;
    }
    const auto s = static_cast<std::size_t>(std::llround(lambda * static_cast<double>(length)));
    return std::clamp<std::size_t>(s, 1, length);
}

struct Patch {
    std::size_t start = 0;
    std::size_t length = 0;
};

/// Patch of length patch_length(L, lambda) with start uniform on {0..L-s}.
inline Patch choose_patch(std::size_t length, double lambda, Rng& rng) {
    Patch p;
    p.length = patch_length(length, lambda);
    p.start = static_cast<std::size_t>(rng.below(length - p.length + 1));
    return p;
}

/// x with positions [a, a+s) taken from the equal-length donor u.
inline FlowSequence augment_mix(const FlowSequence& x, const FlowSequence& u, double lambda, Rng& rng,
                                Patch* chosen = nullptr) {
    if (x.packets.size() != u.packets.size()) {
        throw std::invalid_argument("augment_mix: donor length differs from sample length");
    }
    const Patch p = choose_patch(x.packets.size(), lambda, rng);
    FlowSequence out = x;
    std::copy_n(u.packets.begin() + static_cast<std::ptrdiff_t>(p.start), p.length,
                out.packets.begin() + static_cast<std::ptrdiff_t>(p.start));
    if (chosen) {
        *chosen = p;
    }
    return out;
}

inline TokenizedSequence augment_mix(const TokenizedSequence& x, const TokenizedSequence& u, double lambda, Rng& rng,
                                     Patch* chosen = nullptr) {
    if (x.size() != u.size()) {
        throw std::invalid_argument("augment_mix: donor length differs from sample length");
    }
    const Patch p = choose_patch(x.size(), lambda, rng);
    TokenizedSequence out = x;
    for (std::size_t j = p.start; j < p.start + p.length; ++j) {
        out.protocol[j] = u.protocol[j];
        out.flags[j] = u.flags[j];
        out.direction[j] = u.direction[j];
        out.length[j] = u.length[j];
        out.iat[j] = u.iat[j];
    }
    if (chosen) {
        *chosen = p;
    }
    return out;
}

/// Replaces round(lambda * 43) uniformly chosen features with independent
/// draws from the per-feature marginals.
inline FeatureRow scarf_augment(const FeatureRow& row, const MarginalTable& marginals, double lambda, Rng& rng,
                                std::vector<std::size_t>* replaced = nullptr) {
    if (!(lambda >= 0.0 && lambda < 1.0)) {
        throw std::invalid_argument("scarf_augment: lambda must lie in [0, 1)");
    }
    const auto count = static_cast<std::size_t>(std::llround(lambda * static_cast<double>(kNetFlowFeatures)));
    std::array<std::size_t, kNetFlowFeatures> idx{};
    for (std::size_t k = 0; k < kNetFlowFeatures; ++k) {
        idx[k] = k;
    }
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(kNetFlowFeatures - i));
        std::swap(idx[i], idx[j]);
    }
    FeatureRow out = row;
    for (std::size_t i = 0; i < count; ++i) {
        out[idx[i]] = marginals.sample(idx[i], rng);
    }
    if (replaced) {
        replaced->assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
    }
    return out;
}

inline NetFlowRecord scarf_augment(const NetFlowRecord& row, const MarginalTable& marginals, double lambda, Rng& rng,
                                   std::vector<std::size_t>* replaced = nullptr) {
    NetFlowRecord out = row;
    out.features = scarf_augment(row.features, marginals, lambda, rng, replaced);
    return out;
}

/// Same-length donor sampling over a fixed pool. Samples whose length bucket
/// holds no other member fall back to pairing with themselves.
class DonorPool {
public:
    explicit DonorPool(std::span<const TokenizedSequence> pool) {
        for (std::size_t i = 0; i < pool.size(); ++i) {
            buckets_[pool[i].size()].push_back(i);
        }
    }

    /// Index of a donor for sample `i` of length `len`, never `i` itself
    /// unless the bucket is a singleton.
    std::size_t draw(std::size_t i, std::size_t len, Rng& rng, bool* fallback = nullptr) const {
        const auto it = buckets_.find(len);
        if (it == buckets_.end() || it->second.size() < 2) {
            if (fallback) {
                *fallback = true;
            }
            return i;
        }
        if (fallback) {
            *fallback = false;
        }
        const auto& b = it->second;
        for (;;) {
            const std::size_t j = b[static_cast<std::size_t>(rng.below(b.size()))];
            if (j != i) {
                return j;
            }
        }
    }

private:
    std::map<std::size_t, std::vector<std::size_t>> buckets_;
};

// ---------------------------------------------------------------------------
// Loss

/// Symmetric NT-Xent over the 2N views [Z; Z~]: the positive of row i is its
/// twin, negatives are the other 2N-2 rows. Mean over all 2N anchors.
template <class T>
ad::Tensor<T> nt_xent(const ad::Tensor<T>& z, const ad::Tensor<T>& z_aug, double temperature) {
    if (z.shape().rank() != 2 || !(z.shape() == z_aug.shape())) {
        throw ad::ShapeError("nt_xent: " + z.shape().str() + " vs " + z_aug.shape().str());
    }
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("nt_xent: temperature must be > 0");
    }
    const std::size_t n = z.shape()[0];
    auto views = ad::l2_normalize(ad::concat<T>({z, z_aug}, 0));
    auto sim = ad::scale(ad::batched_matmul(views, views, true), static_cast<T>(1.0 / temperature));
    std::vector<std::uint8_t> diag(4 * n * n, 0);
    for (std::size_t i = 0; i < 2 * n; ++i) {
        diag[i * 2 * n + i] = 1;
    }
    auto logits = ad::masked_fill(sim, diag, -std::numeric_limits<T>::infinity());
    std::vector<std::int32_t> twin(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        twin[i] = static_cast<std::int32_t>(i + n);
        twin[i + n] = static_cast<std::int32_t>(i);
    }
    return ad::cross_entropy(logits, twin);
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainReport {
    std::vector<double> losses;
    std::size_t steps = 0;
    std::size_t skipped_steps = 0;
    std::size_t fallback_pairs = 0;
    std::size_t samples = 0;
};

using StepCallback = std::function<void(std::size_t step, std::size_t total, double loss)>;

/// Contrastive loop shared by both encoders. `make_view(i, rng, fallback)`
/// returns the augmented view of sample i.
template <class T, class Enc, class ViewFn>
PretrainReport contrastive_pretrain(ContrastiveModel<T, Enc>& model, std::span<const typename Enc::Item> data,
                                    const TrainConfig& cfg, Rng& rng, ViewFn make_view,
                                    const StepCallback& on_step = {}) {
    cfg.validate();
    if (data.size() < 2) {
        throw std::invalid_argument("pretrain: need at least 2 training samples");
    }
    using Item = typename Enc::Item;
    Rng order_rng = rng.split(1);
    Rng aug_rng = rng.split(2);
    Rng drop_rng = rng.split(3);
    ad::AdamW<T> opt(nn::tensors_of(model.pretrain_parameters()), cfg.pretrain_optimizer());
    PretrainReport report;
    report.samples = data.size();
    std::vector<std::size_t> order(data.size());
    const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = per_epoch * cfg.pretrain_epochs;
    for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        order_rng.shuffle(order);
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - b0);
            if (n < 2) {
                continue;
            }
            std::vector<Item> views;
            views.reserve(n);
            for (std::size_t r = 0; r < n; ++r) {
                bool fb = false;
                views.push_back(make_view(order[b0 + r], aug_rng, fb));
                report.fallback_pairs += fb ? 1 : 0;
            }
            std::vector<const Item*> ptrs;
            ptrs.reserve(2 * n);
            for (std::size_t r = 0; r < n; ++r) {
                ptrs.push_back(&data[order[b0 + r]]);
            }
            for (const auto& v : views) {
                ptrs.push_back(&v);
            }
            auto h = model.encoder.encode_items(ptrs, true, drop_rng);
            auto z = model.projection(h);
            auto loss = nt_xent(ad::slice(z, 0, 0, n), ad::slice(z, 0, n, 2 * n), cfg.temperature);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) {
                throw ad::NumericError("pretrain: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                       std::to_string(b0 / cfg.batch_size) + " (" + std::to_string(n) +
                                       " samples, first index " + std::to_string(order[b0]) + ")");
            }
            opt.zero_grad();
            ad::backward(loss);
            const auto st = opt.step();
            report.skipped_steps += st.applied ? 0 : 1;
            report.losses.push_back(lv);
            ++report.steps;
            if (on_step) {
                on_step(report.steps, total, lv);
            }
        }
    }
    return report;
}

template <class T>
PretrainReport pretrain(TransformerModel<T>& model, std::span<const TokenizedSequence> data, const TrainConfig& cfg,
                        Rng& rng, const StepCallback& on_step = {}) {
    const DonorPool pool(data);
    auto view = [&](std::size_t i, Rng& r, bool& fallback) {
        const std::size_t j = pool.draw(i, data[i].size(), r, &fallback);
        if (fallback) {
            return data[i];
        }
        return augment_mix(data[i], data[j], cfg.lambda, r);
    };
    return contrastive_pretrain(model, data, cfg, rng, view, on_step);
}

/// Fits z-score normalization on `data`, then trains with marginal
/// resampling as the augmentation.
template <class T>
PretrainReport pretrain(DnnModel<T>& model, std::span<const FeatureRow> data, const TrainConfig& cfg, Rng& rng,
                        const StepCallback& on_step = {}) {
    std::vector<const FeatureRow*> ptrs;
    for (const auto& r : data) {
        ptrs.push_back(&r);
    }
    model.encoder.set_normalization(ZScore::fit(ptrs));
    const MarginalTable marginals(ptrs);
    auto view = [&](std::size_t i, Rng& r, bool& fallback) {
        fallback = false;
        return scarf_augment(data[i], marginals, cfg.lambda, r);
    };
    return contrastive_pretrain(model, data, cfg, rng, view, on_step);
}

// ---------------------------------------------------------------------------
// Inference helpers

/// Indices ordered by item length so eval batches carry little padding.
template <class Item>
std::vector<std::size_t> batching_order(std::span<const Item> items) {
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    if constexpr (requires(const Item& it) { it.size(); }) {
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return items[a].size() < items[b].size(); });
    }
    return order;
}

/// Row-major (n, d) matrix of encoder outputs in eval mode.
template <class T, class Enc>
std::vector<double> embed_all(const Enc& encoder, std::span<const typename Enc::Item> items,
                              std::size_t batch_size = 256) {
    const std::size_t d = encoder.embedding_dim();
    std::vector<double> out(items.size() * d);
    const auto order = batching_order(items);
    ad::NoGradGuard guard;
    Rng unused(0);
    for (std::size_t b0 = 0; b0 < items.size(); b0 += batch_size) {
        const std::size_t n = std::min(batch_size, items.size() - b0);
        std::vector<const typename Enc::Item*> ptrs(n);
        for (std::size_t r = 0; r < n; ++r) {
            ptrs[r] = &items[order[b0 + r]];
        }
        const auto h = encoder.encode_items(ptrs, false, unused);
        const auto v = h.values();
        for (std::size_t r = 0; r < n; ++r) {
            std::copy_n(v.data() + r * d, d, out.data() + order[b0 + r] * d);
        }
    }
    return out;
}

/// Malicious-class probability per item, eval mode.
template <class T, class Enc>
std::vector<double> predict_malicious(const ContrastiveModel<T, Enc>& model, std::span<const typename Enc::Item> items,
                                      std::size_t batch_size = 256) {
    std::vector<double> out(items.size());
    const auto order = batching_order(items);
    ad::NoGradGuard guard;
    Rng unused(0);
    for (std::size_t b0 = 0; b0 < items.size(); b0 += batch_size) {
        const std::size_t n = std::min(batch_size, items.size() - b0);
        std::vector<const typename Enc::Item*> ptrs(n);
        for (std::size_t r = 0; r < n; ++r) {
            ptrs[r] = &items[order[b0 + r]];
        }
        const auto logits = model.classifier(model.encoder.encode_items(ptrs, false, unused));
        const auto v = logits.values();
        for (std::size_t r = 0; r < n; ++r) {
            const double l0 = static_cast<double>(v[2 * r]), l1 = static_cast<double>(v[2 * r + 1]);
            out[order[b0 + r]] = 1.0 / (1.0 + std::exp(l0 - l1));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Patience rule on validation error: strict improvement resets the counter.
class EarlyStopper {
public:
    explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

    /// Records the error of `epoch` (1-based); true when it is a new best.
    /// An equal error counts as progress only if `loss` strictly improved.
    bool update(std::size_t epoch, double error, double loss = std::numeric_limits<double>::infinity()) {
        if (error < best_ || (error == best_ && loss < best_loss_)) {
            best_ = error;
            best_loss_ = loss;
            best_epoch_ = epoch;
            stale_ = 0;
            return true;
        }
        ++stale_;
        return false;
    }

    [[nodiscard]] bool should_stop() const { return stale_ >= patience_; }
    [[nodiscard]] std::size_t best_epoch() const { return best_epoch_; }
    [[nodiscard]] double best_error() const { return best_; }

private:
    std::size_t patience_;
    double best_ = std::numeric_limits<double>::infinity();
    double best_loss_ = std::numeric_limits<double>::infinity();
    std::size_t best_epoch_ = 0;
    std::size_t stale_ = 0;
};

struct StratifiedSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

/// Per-class shuffle; round(fraction * n_c) of each class goes to
/// validation, keeping at least one sample of the class on each side when the
/// class has two or more members.
inline StratifiedSplit stratified_split(std::span<const std::int32_t> labels, double fraction, Rng& rng) {
    std::map<std::int32_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        by_class[labels[i]].push_back(i);
    }
    StratifiedSplit s;
    for (auto& [cls, idx] : by_class) {
        rng.shuffle(idx);
        auto nv = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
        if (idx.size() >= 2) {
            nv = std::clamp<std::size_t>(nv, 1, idx.size() - 1);
        } else {
            nv = 0;
        }
        s.validation.insert(s.validation.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nv));
        s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(nv), idx.end());
    }
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.validation.begin(), s.validation.end());
    return s;
}

struct FinetuneReport {
    std::vector<double> train_loss;
    std::vector<double> validation_error;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    bool early_stopped = false;
    std::size_t train_size = 0;
    std::size_t validation_size = 0;
};

/// Joint encoder + classifier training with cross-entropy; keeps the weights
/// of the best validation epoch.
template <class T, class Enc>
FinetuneReport finetune(ContrastiveModel<T, Enc>& model, std::span<const typename Enc::Item> items,
                        std::span<const std::int32_t> labels, const TrainConfig& cfg, Rng& rng,
                        const StepCallback& on_epoch = {}) {
    cfg.validate();
    if (items.size() != labels.size()) {
        throw std::invalid_argument("finetune: items and labels differ in length");
    }
    bool has0 = false, has1 = false;
    for (auto y : labels) {
        if (y != 0 && y != 1) {
            throw std::invalid_argument("finetune: labels must be 0 (benign) or 1 (malicious)");
        }
        (y == 0 ? has0 : has1) = true;
    }
    if (!has0 || !has1) {
        throw std::invalid_argument("finetune: labeled data must contain both classes");
    }
    using Item = typename Enc::Item;
    Rng split_rng = rng.split(11);
    Rng order_rng = rng.split(12);
    Rng drop_rng = rng.split(13);
    const auto split = stratified_split(labels, cfg.validation_fraction, split_rng);
    FinetuneReport report;
    report.train_size = split.train.size();
    report.validation_size = split.validation.size();

    auto params = model.finetune_parameters();
    ad::AdamW<T> opt(nn::tensors_of(params), cfg.finetune_optimizer());
    EarlyStopper stopper(cfg.patience);
    auto best = nn::snapshot(params);

    std::vector<Item> val_items;
    for (auto i : split.validation) {
        val_items.push_back(items[i]);
    }
    // (error, cross-entropy) on the validation split
    auto validate = [&]() -> std::pair<double, double> {
        if (val_items.empty()) {
            return {0.0, 0.0};
        }
        const auto p = predict_malicious(model, std::span<const Item>(val_items));
        std::size_t wrong = 0;
        double ce = 0.0;
        for (std::size_t r = 0; r < p.size(); ++r) {
            const int y = labels[split.validation[r]];
            wrong += (p[r] > 0.5 ? 1 : 0) != y ? 1 : 0;
            const double q = std::clamp(static_cast<double>(y ? p[r] : 1 - p[r]), 1e-12, 1.0);
            ce -= std::log(q);
        }
        const auto n = static_cast<double>(p.size());
        return {static_cast<double>(wrong) / n, ce / n};
    };

    std::vector<std::size_t> order = split.train;
    for (std::size_t epoch = 1; epoch <= cfg.finetune_max_epochs; ++epoch) {
        order_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.finetune_batch_size) {
            const std::size_t n = std::min(cfg.finetune_batch_size, order.size() - b0);
            std::vector<const Item*> ptrs(n);
            std::vector<std::int32_t> y(n);
            for (std::size_t r = 0; r < n; ++r) {
                ptrs[r] = &items[order[b0 + r]];
                y[r] = labels[order[b0 + r]];
            }
            auto logits = model.classifier(model.encoder.encode_items(ptrs, true, drop_rng));
            auto loss = ad::cross_entropy(logits, y);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) {
                throw ad::NumericError("finetune: non-finite loss at epoch " + std::to_string(epoch));
            }
            opt.zero_grad();
            ad::backward(loss);
            opt.step();
            loss_sum += lv;
            ++batches;
        }
        report.train_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
        const auto [err, val_loss] = validate();
        report.validation_error.push_back(err);
        report.epochs_run = epoch;
        if (stopper.update(epoch, err, val_loss)) {
            best = nn::snapshot(params);
        }
        if (on_epoch) {
            on_epoch(epoch, cfg.finetune_max_epochs, err);
        }
        if (stopper.should_stop()) {
            report.early_stopped = true;
            break;
        }
    }
    nn::restore(params, best);
    report.best_epoch = stopper.best_epoch();
    return report;
}

/// Fine-tuning entry for the NetFlow baseline. A model that was not
/// pretrained gets its normalization fitted on the labeled rows.
template <class T>
FinetuneReport finetune_baseline(DnnModel<T>& model, std::span<const FeatureRow> rows,
                                 std::span<const std::int32_t> labels, const TrainConfig& cfg, Rng& rng,
                                 bool fit_normalization, const StepCallback& on_epoch = {}) {
    if (fit_normalization) {
        std::vector<const FeatureRow*> ptrs;
        for (const auto& r : rows) {
            ptrs.push_back(&r);
        }
        model.encoder.set_normalization(ZScore::fit(ptrs));
    }
    return finetune(model, rows, labels, cfg, rng, on_epoch);
}

}  // namespace flowlens
