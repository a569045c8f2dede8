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

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowlens/tensor.hpp"

namespace flowlens::ad {

/// AdamW hyperparameters. Only the learning rate has a published value for
/// this model family; the remaining defaults are the common ones.
struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    /// Global-norm gradient clipping threshold; disabled when empty.
    std::optional<double> clip_norm;
};

struct StepReport {
    bool applied = false;
    double grad_norm = 0.0;
    std::string reason;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
template <class T>
class AdamW {
public:
    AdamW(std::vector<Tensor<T>> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
        for (const auto& p : params_) {
            if (!p.requires_grad()) {
                throw std::invalid_argument("AdamW: parameter does not require grad");
            }
            m_.emplace_back(p.numel(), T(0));
            v_.emplace_back(p.numel(), T(0));
        }
    }

    void zero_grad() {
        for (auto& p : params_) {
            p.zero_grad();
        }
    }

    /// Applies one update from the accumulated gradients. A non-finite
    /// gradient leaves parameters and state untouched.
    StepReport step() {
        StepReport report;
        double ss = 0.0;
        for (const auto& p : params_) {
            for (T g : p.grad()) {
                ss += static_cast<double>(g) * static_cast<double>(g);
            }
        }
        report.grad_norm = std::sqrt(ss);
        if (!std::isfinite(report.grad_norm)) {
            report.reason = "non-finite gradient";
            return report;
        }
        double clip_scale = 1.0;
        if (config_.clip_norm && report.grad_norm > *config_.clip_norm) {
            clip_scale = *config_.clip_norm / report.grad_norm;
        }

        ++step_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
        const double decay = 1.0 - config_.lr * config_.weight_decay;
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            auto w = p.mutable_values();
            const auto g = p.grad();
            auto& m = m_[k];
            auto& v = v_[k];
            const bool has_grad = g.size() == w.size();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = has_grad ? static_cast<double>(g[i]) * clip_scale : 0.0;
                const double mi = config_.beta1 * static_cast<double>(m[i]) + (1.0 - config_.beta1) * gi;
                const double vi = config_.beta2 * static_cast<double>(v[i]) + (1.0 - config_.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double update = (mi / bc1) / (std::sqrt(vi / bc2) + config_.eps);
                w[i] = static_cast<T>(static_cast<double>(w[i]) * decay - config_.lr * update);
            }
        }
        report.applied = true;
        return report;
    }

    [[nodiscard]] std::uint64_t step_count() const { return step_; }
    [[nodiscard]] const AdamWConfig& config() const { return config_; }
    AdamWConfig& config() { return config_; }
    [[nodiscard]] const std::vector<std::vector<T>>& first_moments() const { return m_; }
    [[nodiscard]] const std::vector<std::vector<T>>& second_moments() const { return v_; }

private:
    std::vector<Tensor<T>> params_;
    AdamWConfig config_;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
    std::uint64_t step_ = 0;
};

}  // namespace flowlens::ad
