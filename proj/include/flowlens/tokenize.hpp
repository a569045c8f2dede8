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
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "flowlens/flow.hpp"

namespace flowlens {

/// Categorical channels use ids 0..65535; the two sentinels sit just above.
inline constexpr std::int32_t kMaxCategoricalToken = 65535;
inline constexpr std::int32_t kClsToken = 65536;
inline constexpr std::int32_t kPadToken = 65537;
inline constexpr std::int32_t kVocabSize = 65538;
inline constexpr std::size_t kMaxSequenceLength = 32;

/// Fixed (not data-fitted) scaling of the numeric channels, so tokens mean
/// the same thing across capture domains.
struct TokenNormalization {
    double max_length_bytes = 65535.0;
    double iat_unit_per_second = 1e6;  // microseconds
    double iat_cap_seconds = 120.0;

    [[nodiscard]] double length_value(std::uint32_t bytes) const {
        return std::clamp(static_cast<double>(bytes) / max_length_bytes, 0.0, 1.0);
    }

    [[nodiscard]] double iat_value(double seconds) const {
        const double v = std::log1p(seconds * iat_unit_per_second) / std::log1p(iat_cap_seconds * iat_unit_per_second);
        return std::clamp(v, 0.0, 1.0);
    }
};

struct TokenizedSequence {
    std::vector<std::int32_t> protocol;
    std::vector<std::int32_t> flags;
    std::vector<std::int32_t> direction;
    std::vector<double> length;
    std::vector<double> iat;

    [[nodiscard]] std::size_t size() const { return protocol.size(); }

    friend bool operator==(const TokenizedSequence&, const TokenizedSequence&) = default;
};

inline TokenizedSequence tokenize(const FlowSequence& flow, const TokenNormalization& norm = {}) {
    const std::size_t n = flow.packets.size();
    if (n == 0 || n > kMaxSequenceLength) {
        throw std::invalid_argument("tokenize: flow length " + std::to_string(n) + " outside [1, 32]");
    }
    TokenizedSequence t;
    t.protocol.reserve(n);
    t.flags.reserve(n);
    t.direction.reserve(n);
    t.length.reserve(n);
    t.iat.reserve(n);
    for (const auto& p : flow.packets) {
        const auto dir = static_cast<std::int32_t>(p.direction);
        if (dir < 0 || dir > 1) {
            throw std::out_of_range("tokenize: direction value " + std::to_string(dir) + " out of range");
        }
        if (!std::isfinite(p.iat) || p.iat < 0.0) {
            throw std::out_of_range("tokenize: invalid inter-arrival time");
        }
        t.protocol.push_back(p.protocol);
        t.flags.push_back(p.tcp_flags);
        t.direction.push_back(dir);
        t.length.push_back(norm.length_value(p.length));
        t.iat.push_back(norm.iat_value(p.iat));
    }
    return t;
}

/// (protocol, flags, direction) per packet, recovered from tokens.
inline std::vector<std::tuple<std::uint8_t, std::uint8_t, Direction>> detokenize_categorical(
    const TokenizedSequence& t) {
    std::vector<std::tuple<std::uint8_t, std::uint8_t, Direction>> out;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t.protocol[i] < 0 || t.protocol[i] > 255 || t.flags[i] < 0 || t.flags[i] > 255 || t.direction[i] < 0 ||
            t.direction[i] > 1) {
            throw std::out_of_range("detokenize_categorical: token out of range");
        }
        out.emplace_back(static_cast<std::uint8_t>(t.protocol[i]), static_cast<std::uint8_t>(t.flags[i]),
                         static_cast<Direction>(t.direction[i]));
    }
    return out;
}

/// Row-major (batch, width) channel arrays. Column 0 is [CLS]; columns past a
/// row's length are [PAD].
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t width = 0;
    std::vector<std::int32_t> protocol;
    std::vector<std::int32_t> flags;
    std::vector<std::int32_t> direction;
    std::vector<double> length;
    std::vector<double> iat;
    std::vector<std::uint8_t> mask;  // 1 = [CLS] or packet, 0 = [PAD]
    std::vector<std::size_t> lengths;
};

/// Pads to the longest sequence (+1 for [CLS]), or to `min_width` if larger.
inline TokenBatch pad_batch(std::span<const TokenizedSequence* const> seqs, std::size_t min_width = 0) {
    if (seqs.empty()) {
        throw std::invalid_argument("pad_batch: empty batch");
    }
    std::size_t max_len = 0;
    for (const auto* s : seqs) {
        if (s->size() == 0 || s->size() > kMaxSequenceLength) {
            throw std::invalid_argument("pad_batch: sequence length " + std::to_string(s->size()) +
                                        " outside [1, 32]");
        }
        max_len = std::max(max_len, s->size());
    }
    TokenBatch b;
    b.batch = seqs.size();
    b.width = std::max(max_len + 1, min_width);
    const std::size_t n = b.batch * b.width;
    b.protocol.assign(n, kPadToken);
    b.flags.assign(n, kPadToken);
    b.direction.assign(n, kPadToken);
    b.length.assign(n, 0.0);
    b.iat.assign(n, 0.0);
    b.mask.assign(n, 0);
    for (std::size_t r = 0; r < b.batch; ++r) {
        const auto& s = *seqs[r];
        const std::size_t base = r * b.width;
        b.protocol[base] = b.flags[base] = b.direction[base] = kClsToken;
        b.mask[base] = 1;
        for (std::size_t i = 0; i < s.size(); ++i) {
            b.protocol[base + 1 + i] = s.protocol[i];
            b.flags[base + 1 + i] = s.flags[i];
            b.direction[base + 1 + i] = s.direction[i];
            b.length[base + 1 + i] = s.length[i];
            b.iat[base + 1 + i] = s.iat[i];
            b.mask[base + 1 + i] = 1;
        }
        b.lengths.push_back(s.size());
    }
    return b;
}

inline TokenBatch pad_batch(std::span<const TokenizedSequence> seqs, std::size_t min_width = 0) {
    std::vector<const TokenizedSequence*> ptrs;
    ptrs.reserve(seqs.size());
    for (const auto& s : seqs) {
        ptrs.push_back(&s);
    }
    return pad_batch(std::span<const TokenizedSequence* const>(ptrs), min_width);
}

}  // namespace flowlens
