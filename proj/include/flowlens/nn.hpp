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

#include <string>
#include <vector>

#include "flowlens/checkpoint.hpp"
#include "flowlens/ops.hpp"
#include "flowlens/rng.hpp"
#include "flowlens/tensor.hpp"

namespace flowlens::nn {

using ad::Shape;
using ad::Tensor;

template <class T>
Tensor<T> truncated_normal(const Shape& shape, double stddev, Rng& rng) {
    std::vector<T> v(shape.numel());
    for (auto& x : v) {
        x = static_cast<T>(rng.truncated_normal(stddev));
    }
    return Tensor<T>::from(shape, std::move(v), true);
}

template <class T>
Tensor<T> zeros_param(const Shape& shape) {
    return Tensor<T>::zeros(shape, true);
}

template <class T>
Tensor<T> ones_param(const Shape& shape) {
    return Tensor<T>::full(shape, T(1), true);
}

/// Affine map over the last axis.
template <class T>
struct Linear {
    Tensor<T> weight;  // (in, out)
    Tensor<T> bias;    // (out)

    Linear() = default;
    Linear(std::size_t in, std::size_t out, double init_std, Rng& rng)
        : weight(truncated_normal<T>(Shape{in, out}, init_std, rng)), bias(zeros_param<T>(Shape{out})) {}

    [[nodiscard]] Tensor<T> operator()(const Tensor<T>& x) const {
        return ad::linear(x, weight, bias);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }

    [[nodiscard]] std::size_t in_features() const { return weight.shape()[0]; }
    [[nodiscard]] std::size_t out_features() const { return weight.shape()[1]; }
};

template <class T>
struct LayerNorm {
    Tensor<T> gamma;
    Tensor<T> beta;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t dim) : gamma(ones_param<T>(Shape{dim})), beta(zeros_param<T>(Shape{dim})) {}

    [[nodiscard]] Tensor<T> operator()(const Tensor<T>& x) const { return ad::layernorm(x, gamma, beta); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

/// in -> hidden (ReLU) -> out. Used for the projection and classifier heads.
template <class T>
struct MlpHead {
    Linear<T> hidden;
    Linear<T> output;

    MlpHead() = default;
    MlpHead(std::size_t in, std::size_t hidden_width, std::size_t out, double init_std, Rng& rng)
        : hidden(in, hidden_width, init_std, rng), output(hidden_width, out, init_std, rng) {}

    [[nodiscard]] Tensor<T> operator()(const Tensor<T>& x) const { return output(ad::relu(hidden(x))); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
        hidden.collect(prefix + ".hidden", out);
        output.collect(prefix + ".output", out);
    }

    [[nodiscard]] std::vector<NamedTensor<T>> named_parameters(const std::string& prefix) const {
        std::vector<NamedTensor<T>> out;
        collect(prefix, out);
        return out;
    }
};

template <class T>
std::vector<Tensor<T>> tensors_of(const std::vector<NamedTensor<T>>& named) {
    std::vector<Tensor<T>> out;
    out.reserve(named.size());
    for (const auto& n : named) {
        out.push_back(n.tensor);
    }
    return out;
}

/// Value snapshot of a parameter list (for best-epoch restore).
template <class T>
std::vector<std::vector<T>> snapshot(const std::vector<NamedTensor<T>>& params) {
    std::vector<std::vector<T>> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    }
    return out;
}

template <class T>
void restore(std::vector<NamedTensor<T>>& params, const std::vector<std::vector<T>>& values) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto dst = params[i].tensor.mutable_values();
        std::copy(values[i].begin(), values[i].end(), dst.begin());
    }
}

/// Deep copy of parameter values into already-shaped destination tensors.
template <class T>
void copy_values(const std::vector<NamedTensor<T>>& src, std::vector<NamedTensor<T>>& dst) {
    if (src.size() != dst.size()) {
        throw std::invalid_argument("copy_values: parameter count mismatch");
    }
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (!(src[i].tensor.shape() == dst[i].tensor.shape())) {
            throw ad::ShapeError("copy_values: " + src[i].name + " shape mismatch");
        }
        auto out = dst[i].tensor.mutable_values();
        std::copy(src[i].tensor.values().begin(), src[i].tensor.values().end(), out.begin());
    }
}

}  // namespace flowlens::nn
