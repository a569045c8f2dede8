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

// Evaluation protocols over labeled datasets: unsupervised similarity
// detection, few-shot fine-tuning from random or pretrained weights, and the
// cross-dataset grid.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowlens/contrastive.hpp"
#include "flowlens/evaluation.hpp"
#include "flowlens/pipeline.hpp"

namespace flowlens {

enum class ModelKind { kTransformer, kDnn };

inline const char* model_kind_name(ModelKind k) { return k == ModelKind::kTransformer ? "transformer" : "dnn"; }

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "transformer") {
        return ModelKind::kTransformer;
    }
    if (s == "dnn" || s == "baseline") {
        return ModelKind::kDnn;
    }
    throw std::invalid_argument("unknown model kind '" + s + "' (expected transformer or dnn)");
}

struct ExperimentConfig {
    ModelConfig model;
    DnnConfig dnn;
    TrainConfig train;
    SplitSpec split;
    std::size_t pretrain_cap = 0;  // 0 keeps every pretraining flow
    std::size_t test_cap = 0;      // 0 keeps every test flow
    std::size_t reference_cap = 50000;

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"model", model.to_json()},       {"dnn", dnn.to_json()},
                {"train", train.to_json()},       {"split", split.to_json()},
                {"pretrain_cap", pretrain_cap},   {"test_cap", test_cap},
                {"reference_cap", reference_cap}};
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        ExperimentConfig c;
        if (j.contains("model")) {
            c.model = ModelConfig::from_json(j["model"]);
        }
        if (j.contains("dnn")) {
            c.dnn = DnnConfig::from_json(j["dnn"]);
        }
        if (j.contains("train")) {
            c.train = TrainConfig::from_json(j["train"]);
        }
        if (j.contains("split")) {
            c.split = SplitSpec::from_json(j["split"]);
        }
        c.pretrain_cap = j.value("pretrain_cap", c.pretrain_cap);
        c.test_cap = j.value("test_cap", c.test_cap);
        c.reference_cap = j.value("reference_cap", c.reference_cap);
        return c;
    }
};

template <class Item>
const std::vector<Item>& items_of(const Dataset& d) {
    if constexpr (std::is_same_v<Item, TokenizedSequence>) {
        return d.tokens;
    } else {
        return d.features;
    }
}

template <class T>
TransformerModel<T> new_model(const ExperimentConfig& cfg, Rng& rng, TransformerModel<T>* /*tag*/) {
    return make_transformer_model<T>(cfg.model, rng);
}

template <class T>
DnnModel<T> new_model(const ExperimentConfig& cfg, Rng& rng, DnnModel<T>* /*tag*/) {
    return make_dnn_model<T>(cfg.dnn, rng);
}

template <class Model>
Model new_model(const ExperimentConfig& cfg, Rng& rng) {
    return new_model<typename Model::Scalar>(cfg, rng, static_cast<Model*>(nullptr));
}

/// Per-dataset index sets used by every protocol, with the configured caps
/// applied.
struct ProtocolSplits {
    std::vector<std::size_t> pretrain;
    std::vector<std::size_t> supervised;
    std::vector<std::size_t> test;
};

inline ProtocolSplits protocol_splits(const Dataset& d, const ExperimentConfig& cfg) {
    const auto s = make_splits(d.labels, cfg.split);
    Rng rng(cfg.split.seed, 0xcab);
    ProtocolSplits out;
    out.pretrain = cap_indices(s.pretrain, cfg.pretrain_cap, rng);
    out.supervised = s.supervised;
    out.test = cap_indices(s.test, cfg.test_cap, rng);
    return out;
}

/// Fresh model trained contrastively on the benign pretraining split.
template <class Model>
Model pretrained_model(const Dataset& d, const ProtocolSplits& splits, const ExperimentConfig& cfg, Rng& rng,
                       PretrainReport* report = nullptr, const StepCallback& on_step = {}) {
    using Item = typename Model::Item;
    Rng init = rng.split(101);
    Rng train = rng.split(102);
    auto model = new_model<Model>(cfg, init);
    const auto data = gather(std::span<const Item>(items_of<Item>(d)), std::span<const std::size_t>(splits.pretrain));
    auto rep = pretrain(model, std::span<const Item>(data), cfg.train, train, on_step);
    if (report) {
        *report = std::move(rep);
    }
    return model;
}

/// Unsupervised detection: the reference set is the (capped) benign
/// pretraining split of `ref`, scored flows are the test split of `target`.
template <class Model>
AUCResult unsupervised_auc(const Model& model, const Dataset& ref, const ProtocolSplits& ref_splits,
                           const Dataset& target, const ProtocolSplits& target_splits, const ExperimentConfig& cfg,
                           std::vector<double>* scores = nullptr) {
    using Item = typename Model::Item;
    Rng rng(cfg.split.seed, 0x4ef);
    const auto ref_idx = cap_indices(ref_splits.pretrain, cfg.reference_cap, rng);
    const auto reference = gather(std::span<const Item>(items_of<Item>(ref)), std::span<const std::size_t>(ref_idx));
    const auto test =
        gather(std::span<const Item>(items_of<Item>(target)), std::span<const std::size_t>(target_splits.test));
    const auto y = gather(std::span<const std::int32_t>(target.labels), std::span<const std::size_t>(target_splits.test));
    return run_unsupervised_eval<typename Model::Scalar>(model.encoder, std::span<const Item>(reference),
                                                         std::span<const Item>(test), y, scores);
}

/// Few-shot fine-tuning of a copy of `init` on a stratified labeled subset
/// of `target`'s supervised split, scored on its test split.
template <class Model>
FewshotResult fewshot_auc(const Model& init, bool pretrained, const Dataset& target, const ProtocolSplits& splits,
                          const ExperimentConfig& cfg, Rng& rng) {
    using Item = typename Model::Item;
    Rng pick = rng.split(201);
    Rng train = rng.split(202);
    const auto labeled_idx = fewshot_sample(splits.supervised, target.labels, cfg.split.fewshot_fraction,
                                            target.size(), pick);
    const auto& all = items_of<Item>(target);
    const auto labeled = gather(std::span<const Item>(all), std::span<const std::size_t>(labeled_idx));
    const auto labeled_y = gather(std::span<const std::int32_t>(target.labels), std::span<const std::size_t>(labeled_idx));
    const auto test = gather(std::span<const Item>(all), std::span<const std::size_t>(splits.test));
    const auto test_y = gather(std::span<const std::int32_t>(target.labels), std::span<const std::size_t>(splits.test));
    return run_fewshot_eval(init, std::span<const Item>(labeled), labeled_y, std::span<const Item>(test), test_y,
                            cfg.train, train, !pretrained);
}

/// Progress sink for long runs: (stage, message).
using ProgressFn = std::function<void(const std::string&, const std::string&)>;

struct NamedDataset {
    std::string name;
    const Dataset* data;
};

struct MatrixResult {
    std::vector<ComparisonTable> tables;
    nlohmann::json metrics = nlohmann::json::object();
};

/// Full grid for one model family over k datasets: a k x k unsupervised table
/// (reference/pretraining dataset by test dataset) and a (k+1) x k few-shot
/// table whose first row starts from random weights.
template <class Model>
MatrixResult run_matrix(const std::vector<NamedDataset>& datasets, const ExperimentConfig& cfg, std::uint64_t seed,
                        const ProgressFn& progress = {}) {
    const char* family = std::is_same_v<typename Model::Item, TokenizedSequence> ? "transformer" : "dnn";
    std::vector<std::string> names;
    std::vector<ProtocolSplits> splits;
    for (const auto& d : datasets) {
        names.push_back(d.name);
        splits.push_back(protocol_splits(*d.data, cfg));
    }
    std::vector<std::string> fewshot_rows = {"random"};
    for (const auto& n : names) {
        fewshot_rows.push_back("pretrained:" + n);
    }
    MatrixResult out;
    ComparisonTable unsup(std::string("unsupervised_") + family, "train\\test", names, names);
    ComparisonTable few(std::string("fewshot_") + family, "init\\target", fewshot_rows, names);
    const Rng root(seed, 0x3a7);

    std::vector<Model> pretrained;
    for (std::size_t a = 0; a < datasets.size(); ++a) {
        if (progress) {
            progress("matrix", std::string(family) + ": pretraining on " + names[a]);
        }
        Rng rng = root.split(a + 1);
        PretrainReport rep;
        pretrained.push_back(pretrained_model<Model>(*datasets[a].data, splits[a], cfg, rng, &rep));
        out.metrics["pretrain"][names[a]] = {{"steps", rep.steps},
                                             {"final_loss", rep.losses.empty() ? 0.0 : rep.losses.back()}};
    }
    for (std::size_t a = 0; a < datasets.size(); ++a) {
        for (std::size_t b = 0; b < datasets.size(); ++b) {
            const auto r = unsupervised_auc(pretrained[a], *datasets[a].data, splits[a], *datasets[b].data, splits[b], cfg);
            unsup.set(a, b, r.auc);
            if (progress) {
                progress("matrix", std::string(family) + ": unsupervised " + names[a] + " -> " + names[b] + " AUC " +
                                       std::to_string(r.auc));
            }
        }
    }
    for (std::size_t b = 0; b < datasets.size(); ++b) {
        Rng init_rng = root.split(1000 + b);
        const auto random = new_model<Model>(cfg, init_rng);
        for (std::size_t row = 0; row <= datasets.size(); ++row) {
            Rng rng = root.split(2000 + 100 * b + row);
            const Model& init = row == 0 ? random : pretrained[row - 1];
            const auto r = fewshot_auc(init, row != 0, *datasets[b].data, splits[b], cfg, rng);
            few.set(row, b, r.auc.auc);
            if (progress) {
                progress("matrix", std::string(family) + ": few-shot " + fewshot_rows[row] + " -> " + names[b] +
                                       " AUC " + std::to_string(r.auc.auc));
            }
        }
    }
    out.tables.push_back(std::move(unsup));
    out.tables.push_back(std::move(few));
    return out;
}

}  // namespace flowlens
