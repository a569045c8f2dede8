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

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowlens/netflow.hpp"
#include "flowlens/nn.hpp"
#include "flowlens/ops.hpp"

namespace flowlens {

/// Per-feature z-score parameters fitted on a training split, applied after
/// a signed log1p. NetFlow rates and byte counts span many orders of
/// magnitude; without the compression, flows unlike the fitting split land
/// hundreds of standard deviations out. Zero-variance features map to 0.
struct ZScore {
    FeatureRow mean{};
    FeatureRow stddev = [] {
        FeatureRow r;
        r.fill(1.0);
        return r;
    }();

    static ZScore fit(std::span<const FeatureRow* const> rows) {
        if (rows.empty()) {
            throw std::invalid_argument("ZScore::fit: empty training split");
        }
        ZScore z;
        for (std::size_t k = 0; k < kNetFlowFeatures; ++k) {
            detail::RunningStats s;
            for (const auto* r : rows) {
                s.push(compress((*r)[k]));
            }
            z.mean[k] = s.mean;
            z.stddev[k] = s.stddev();
        }
        return z;
    }

    static double compress(double x) { return std::copysign(std::log1p(std::abs(x)), x); }

    [[nodiscard]] double apply(std::size_t k, double x) const {
        return stddev[k] > 0.0 ? (compress(x) - mean[k]) / stddev[k] : 0.0;
    }

    [[nodiscard]] nlohmann::json to_json() const { return {{"mean", mean}, {"stddev", stddev}}; }

    static ZScore from_json(const nlohmann::json& j) {
        ZScore z;
        z.mean = j.at("mean").get<FeatureRow>();
        z.stddev = j.at("stddev").get<FeatureRow>();
        return z;
    }
};

struct DnnConfig {
    std::size_t n_layers = 4;
    std::size_t width = 256;
    std::size_t proj_hidden = 256;
    std::size_t proj_dim = 128;
    std::size_t cls_hidden = 128;
    double init_std = 0.02;

    void validate() const {
        if (n_layers == 0 || width == 0 || proj_hidden == 0 || proj_dim == 0 || cls_hidden == 0) {
            throw std::invalid_argument("DnnConfig: every dimension must be >= 1");
        }
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"n_layers", n_layers},     {"width", width},       {"proj_hidden", proj_hidden},
                {"proj_dim", proj_dim},     {"cls_hidden", cls_hidden}, {"init_std", init_std}};
    }

    static DnnConfig from_json(const nlohmann::json& j) {
        DnnConfig c;
        c.n_layers = j.value("n_layers", c.n_layers);
        c.width = j.value("width", c.width);
        c.proj_hidden = j.value("proj_hidden", c.proj_hidden);
        c.proj_dim = j.value("proj_dim", c.proj_dim);
        c.cls_hidden = j.value("cls_hidden", c.cls_hidden);
        c.init_std = j.value("init_std", c.init_std);
        c.validate();
        return c;
    }
};

/// NetFlow baseline encoder: z-scored 43 features through stacked affine
/// layers with ReLU between them.
template <class T>
class DnnEncoder {
public:
    using Item = FeatureRow;

    DnnEncoder(const DnnConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        std::size_t in = kNetFlowFeatures;
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            layers_.emplace_back(in, cfg_.width, cfg_.init_std, rng);
            in = cfg_.width;
        }
    }

    [[nodiscard]] const DnnConfig& config() const { return cfg_; }
    [[nodiscard]] std::size_t embedding_dim() const { return cfg_.width; }

    [[nodiscard]] DnnEncoder clone() const {
        Rng scratch(0);
        DnnEncoder c(cfg_, scratch);
        auto dst = c.named_parameters();
        nn::copy_values(named_parameters(), dst);
        c.norm_ = norm_;
        return c;
    }

    void set_normalization(const ZScore& z) { norm_ = z; }
    [[nodiscard]] const ZScore& normalization() const { return norm_; }

    [[nodiscard]] ad::Tensor<T> encode_items(std::span<const FeatureRow* const> rows, bool /*train*/,
                                             Rng& /*rng*/) const {
        if (rows.empty()) {
            throw std::invalid_argument("DnnEncoder: empty batch");
        }
        std::vector<T> x(rows.size() * kNetFlowFeatures);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t k = 0; k < kNetFlowFeatures; ++k) {
                x[i * kNetFlowFeatures + k] = static_cast<T>(norm_.apply(k, (*rows[i])[k]));
            }
        }
        auto h = ad::Tensor<T>::from({rows.size(), kNetFlowFeatures}, std::move(x));
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            h = layers_[l](h);
            if (l + 1 < layers_.size()) {
                h = ad::relu(h);
            }
        }
        return h;
    }

    [[nodiscard]] std::vector<NamedTensor<T>> named_parameters() const {
        std::vector<NamedTensor<T>> out;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            layers_[l].collect("dnn.layer" + std::to_string(l), out);
        }
        return out;
    }

private:
    DnnConfig cfg_;
    std::vector<nn::Linear<T>> layers_;
    ZScore norm_{};
};

}  // namespace flowlens
