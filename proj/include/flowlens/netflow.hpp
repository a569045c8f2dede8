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
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "flowlens/flow.hpp"
#include "flowlens/rng.hpp"

namespace flowlens {

inline constexpr std::size_t kNetFlowFeatures = 43;

/// Frozen column order of the statistical flow record. See
/// docs/dataset_format.md for definitions.
inline constexpr std::array<std::string_view, kNetFlowFeatures> kNetFlowColumns = {
    "protocol",          "flow_duration",     "total_packets",     "fwd_packets",       "bwd_packets",
    "pkt_len_mean",      "pkt_len_max",       "pkt_len_min",       "pkt_len_std",       "pkt_len_total",
    "fwd_pkt_len_mean",  "fwd_pkt_len_max",   "fwd_pkt_len_min",   "fwd_pkt_len_std",   "fwd_pkt_len_total",
    "bwd_pkt_len_mean",  "bwd_pkt_len_max",   "bwd_pkt_len_min",   "bwd_pkt_len_std",   "bwd_pkt_len_total",
    "flow_iat_mean",     "flow_iat_max",      "flow_iat_min",      "flow_iat_std",      "fwd_iat_mean",
    "fwd_iat_max",       "fwd_iat_min",       "fwd_iat_std",       "bwd_iat_mean",      "bwd_iat_max",
    "bwd_iat_min",       "bwd_iat_std",       "fin_count",         "syn_count",         "rst_count",
    "psh_count",         "ack_count",         "urg_count",         "ece_count",         "cwr_count",
    "flow_bytes_per_s",  "flow_packets_per_s", "down_up_ratio",
};

namespace nf {
inline constexpr std::size_t kProtocol = 0;
inline constexpr std::size_t kDuration = 1;
inline constexpr std::size_t kTotalPackets = 2;
inline constexpr std::size_t kFwdPackets = 3;
inline constexpr std::size_t kBwdPackets = 4;
inline constexpr std::size_t kLen = 5;      // mean, max, min, std, total
inline constexpr std::size_t kFwdLen = 10;  // mean, max, min, std, total
inline constexpr std::size_t kBwdLen = 15;  // mean, max, min, std, total
inline constexpr std::size_t kIat = 20;     // mean, max, min, std
inline constexpr std::size_t kFwdIat = 24;  // mean, max, min, std
inline constexpr std::size_t kBwdIat = 28;  // mean, max, min, std
inline constexpr std::size_t kFlagCounts = 32;  // FIN SYN RST PSH ACK URG ECE CWR
inline constexpr std::size_t kBytesPerSec = 40;
inline constexpr std::size_t kPacketsPerSec = 41;
inline constexpr std::size_t kDownUpRatio = 42;
}  // namespace nf

using FeatureRow = std::array<double, kNetFlowFeatures>;

struct NetFlowRecord {
    std::uint64_t id = 0;
    std::optional<Label> label;
    std::string attack;
    FeatureRow features{};

    friend bool operator==(const NetFlowRecord&, const NetFlowRecord&) = default;
};

namespace detail {

/// Streaming mean / population variance / extrema (Welford).
struct RunningStats {
    std::size_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    double total = 0.0;

    void push(double x) {
        ++n;
        total += x;
        if (n == 1) {
            lo = hi = x;
        } else {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        const double delta = x - mean;
        mean += delta / static_cast<double>(n);
        m2 += delta * (x - mean);
    }

    [[nodiscard]] double stddev() const { return n == 0 ? 0.0 : std::sqrt(std::max(m2, 0.0) / static_cast<double>(n)); }

    /// mean, max, min, std (, total)
    void write(double* out, bool with_total) const {
        if (n == 0) {
            std::fill_n(out, with_total ? 5 : 4, 0.0);
            return;
        }
        out[0] = mean;
        out[1] = hi;
        out[2] = lo;
        out[3] = stddev();
        if (with_total) {
            out[4] = total;
        }
    }
};

}  // namespace detail

/// Statistical record over exactly the packets present in `flow`.
inline NetFlowRecord compute_netflow(const FlowSequence& flow) {
    if (flow.packets.empty()) {
        throw std::invalid_argument("compute_netflow: empty flow");
    }
    NetFlowRecord rec;
    rec.id = flow.id;
    rec.label = flow.label;
    rec.attack = flow.attack;
    auto& f = rec.features;

    detail::RunningStats len, fwd_len, bwd_len, iat, fwd_iat, bwd_iat;
    std::array<double, 8> flags{};
    double t = 0.0;
    std::optional<double> since_fwd, since_bwd;
    for (std::size_t i = 0; i < flow.packets.size(); ++i) {
        const auto& p = flow.packets[i];
        if (i > 0) {
            t += p.iat;
            iat.push(p.iat);
            // Gaps are summed from the per-packet IATs rather than taken as
            // differences of the running clock, which would lose precision on
            // long flows.
            if (since_fwd) {
                *since_fwd += p.iat;
            }
            if (since_bwd) {
                *since_bwd += p.iat;
            }
        }
        const auto bytes = static_cast<double>(p.length);
        len.push(bytes);
        if (p.direction == Direction::kForward) {
            fwd_len.push(bytes);
            if (since_fwd) {
                fwd_iat.push(*since_fwd);
            }
            since_fwd = 0.0;
        } else {
            bwd_len.push(bytes);
            if (since_bwd) {
                bwd_iat.push(*since_bwd);
            }
            since_bwd = 0.0;
        }
        for (int b = 0; b < 8; ++b) {
            if (p.tcp_flags & (1u << b)) {
                flags[b] += 1.0;
            }
        }
    }

    f[nf::kProtocol] = flow.packets.front().protocol;
    f[nf::kDuration] = t;
    f[nf::kTotalPackets] = static_cast<double>(len.n);
    f[nf::kFwdPackets] = static_cast<double>(fwd_len.n);
    f[nf::kBwdPackets] = static_cast<double>(bwd_len.n);
    len.write(&f[nf::kLen], true);
    fwd_len.write(&f[nf::kFwdLen], true);
    bwd_len.write(&f[nf::kBwdLen], true);
    iat.write(&f[nf::kIat], false);
    fwd_iat.write(&f[nf::kFwdIat], false);
    bwd_iat.write(&f[nf::kBwdIat], false);
    std::copy(flags.begin(), flags.end(), f.begin() + nf::kFlagCounts);
    f[nf::kBytesPerSec] = t > 0.0 ? len.total / t : 0.0;
    f[nf::kPacketsPerSec] = t > 0.0 ? static_cast<double>(len.n) / t : 0.0;
    f[nf::kDownUpRatio] = fwd_len.n > 0 ? static_cast<double>(bwd_len.n) / static_cast<double>(fwd_len.n) : 0.0;
    return rec;
}

/// Per-feature empirical distributions for marginal resampling.
class MarginalTable {
public:
    explicit MarginalTable(std::span<const NetFlowRecord> rows) {
        if (rows.empty()) {
            throw std::invalid_argument("MarginalTable: empty dataset");
        }
        for (auto& c : columns_) {
            c.reserve(rows.size());
        }
        for (const auto& r : rows) {
            for (std::size_t k = 0; k < kNetFlowFeatures; ++k) {
                columns_[k].push_back(r.features[k]);
            }
        }
    }

    explicit MarginalTable(std::span<const FeatureRow* const> rows) {
        if (rows.empty()) {
            throw std::invalid_argument("MarginalTable: empty dataset");
        }
        for (auto& c : columns_) {
            c.reserve(rows.size());
        }
        for (const auto* r : rows) {
            for (std::size_t k = 0; k < kNetFlowFeatures; ++k) {
                columns_[k].push_back((*r)[k]);
            }
        }
    }

    /// Uniform draw from the observed values of `feature`.
    double sample(std::size_t feature, Rng& rng) const {
        const auto& c = columns_.at(feature);
        return c[static_cast<std::size_t>(rng.below(c.size()))];
    }

    [[nodiscard]] std::span<const double> column(std::size_t feature) const { return columns_.at(feature); }
    [[nodiscard]] std::size_t rows() const { return columns_[0].size(); }

private:
    std::array<std::vector<double>, kNetFlowFeatures> columns_;
};

}  // namespace flowlens
