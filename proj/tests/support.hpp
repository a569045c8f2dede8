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

// Test-only helpers: finite-difference gradient checks and small builders.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "flowlens/ops.hpp"
#include "flowlens/rng.hpp"
#include "flowlens/tensor.hpp"

namespace flowlens::testkit {

using ad::Shape;
using ad::Tensor;

inline Tensor<double> random_tensor(const Shape& s, Rng& rng, double scale = 1.0, bool requires_grad = true) {
    std::vector<double> v(s.numel());
    for (auto& x : v) {
        x = scale * rng.normal();
    }
    return Tensor<double>::from(s, std::move(v), requires_grad);
}

/// Values bounded away from zero (for kinks such as relu).
inline Tensor<double> away_from_zero(const Shape& s, Rng& rng, double margin = 0.05) {
    std::vector<double> v(s.numel());
    for (auto& x : v) {
        const double m = margin + rng.uniform();
        x = rng.uniform() < 0.5 ? -m : m;
    }
    return Tensor<double>::from(s, std::move(v), true);
}

/// Scalar probe sum(w * y) with fixed random weights, so every output entry
/// carries an O(1) upstream gradient.
inline Tensor<double> probe(const Tensor<double>& y, std::uint64_t seed = 99) {
    Rng rng(seed);
    auto w = random_tensor(y.shape(), rng, 1.0, false);
    return ad::sum(ad::mul(y, w));
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

inline double rel_error(double analytic, double numeric, double floor = 1e-2) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences on the listed entries of each input (all entries when
/// `entries` is empty for that input).
inline GradCheck gradcheck(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> inputs,
                           double h = 1e-5, const std::vector<std::vector<std::size_t>>& entries = {}) {
    for (auto& t : inputs) {
        t.zero_grad();
    }
    auto loss = loss_fn();
    ad::backward(loss);
    std::vector<std::vector<double>> analytic;
    for (const auto& t : inputs) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
    }
    GradCheck out;
    ad::NoGradGuard guard;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto vals = inputs[k].mutable_values();
        std::vector<std::size_t> idx;
        if (k < entries.size() && !entries[k].empty()) {
            idx = entries[k];
        } else {
            for (std::size_t i = 0; i < vals.size(); ++i) {
                idx.push_back(i);
            }
        }
        for (std::size_t i : idx) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double up = loss_fn().item();
            vals[i] = orig - h;
            const double down = loss_fn().item();
            vals[i] = orig;
            const double numeric = (up - down) / (2 * h);
            out.max_rel_error = std::max(out.max_rel_error, rel_error(analytic[k][i], numeric));
            ++out.checked;
        }
    }
    return out;
}

}  // namespace flowlens::testkit
