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

// Capture -> flows -> model-ready datasets, shared by the CLI and the
// experiment runners.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowlens/dataset_io.hpp"
#include "flowlens/dnn.hpp"
#include "flowlens/flow.hpp"
#include "flowlens/labels.hpp"
#include "flowlens/netflow.hpp"
#include "flowlens/pcap.hpp"
#include "flowlens/synth.hpp"
#include "flowlens/tokenize.hpp"

namespace flowlens {

/// Both dataset views of one assembly pass, row-aligned by flow id.
struct Corpus {
    std::vector<FlowSequence> flows;
    std::vector<NetFlowRecord> netflow;
    CaptureStats capture;
    AssemblyStats assembly;
};

inline void merge_capture_stats(CaptureStats& into, const CaptureStats& s) {
    into.records += s.records;
    into.ip_packets += s.ip_packets;
    into.skipped_non_ip += s.skipped_non_ip;
    into.skipped_short += s.skipped_short;
    into.degraded_tcp += s.degraded_tcp;
    into.truncated = into.truncated || s.truncated;
    into.warnings.insert(into.warnings.end(), s.warnings.begin(), s.warnings.end());
}

inline Corpus build_corpus(std::span<const PacketFields> packets, const LabelRules* rules = nullptr,
                           const AssemblyOptions& options = {}) {
    Corpus c;
    c.flows = assemble_flows(packets, options, rules ? rules->labeler() : Labeler{}, &c.assembly);
    c.netflow.reserve(c.flows.size());
    for (const auto& f : c.flows) {
        c.netflow.push_back(compute_netflow(f));
    }
    return c;
}

/// Packets of several captures merged into one timeline (stable on ties, so
/// file order breaks them).
inline Corpus build_corpus(const std::vector<ParsedCapture>& captures, const LabelRules* rules = nullptr,
                           const AssemblyOptions& options = {}) {
    std::vector<PacketFields> all;
    CaptureStats stats;
    for (const auto& cap : captures) {
        all.insert(all.end(), cap.packets.begin(), cap.packets.end());
        merge_capture_stats(stats, cap.stats);
    }
    std::stable_sort(all.begin(), all.end(),
                     [](const PacketFields& a, const PacketFields& b) { return a.timestamp_us < b.timestamp_us; });
    auto c = build_corpus(all, rules, options);
    c.capture = std::move(stats);
    return c;
}

/// Generates a capture and runs it through the full ingest path.
inline Corpus synth_corpus(const TrafficProfile& profile) {
    const auto cap = generate(profile);
    const std::vector<ParsedCapture> parsed = {parse_pcap(cap.pcap)};
    return build_corpus(parsed, &cap.labels);
}

/// Labeled, tokenized corpus: row i of every member describes the same flow.
struct Dataset {
    std::vector<TokenizedSequence> tokens;
    std::vector<FeatureRow> features;
    std::vector<std::int32_t> labels;

    [[nodiscard]] std::size_t size() const { return labels.size(); }

    [[nodiscard]] Dataset subset(std::span<const std::size_t> idx) const {
        Dataset d;
        d.tokens.reserve(idx.size());
        d.features.reserve(idx.size());
        d.labels.reserve(idx.size());
        for (auto i : idx) {
            d.tokens.push_back(tokens.at(i));
            d.features.push_back(features.at(i));
            d.labels.push_back(labels.at(i));
        }
        return d;
    }

    [[nodiscard]] std::size_t malicious() const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    }
};

inline Dataset make_dataset(const std::vector<FlowSequence>& flows, const std::vector<NetFlowRecord>& netflow) {
    if (flows.size() != netflow.size()) {
        throw std::invalid_argument("make_dataset: sequence and NetFlow datasets differ in size (" +
                                    std::to_string(flows.size()) + " vs " + std::to_string(netflow.size()) + ")");
    }
    Dataset d;
    d.labels = binary_labels(flows);
    d.tokens.reserve(flows.size());
    d.features.reserve(flows.size());
    for (std::size_t i = 0; i < flows.size(); ++i) {
        if (flows[i].id != netflow[i].id) {
            throw std::invalid_argument("make_dataset: flow ids of the two datasets are not aligned at row " +
                                        std::to_string(i));
        }
        d.tokens.push_back(tokenize(flows[i]));
        d.features.push_back(netflow[i].features);
    }
    return d;
}

inline Dataset make_dataset(const Corpus& c) { return make_dataset(c.flows, c.netflow); }

/// Keeps at most `cap` indices, chosen uniformly; order is preserved.
inline std::vector<std::size_t> cap_indices(std::vector<std::size_t> idx, std::size_t cap, Rng& rng) {
    if (cap == 0 || idx.size() <= cap) {
        return idx;
    }
    rng.shuffle(idx);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// 64-bit FNV-1a, used for content and config fingerprints in run manifests.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s) {
    return fnv1a(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

inline std::string file_hash(const std::filesystem::path& p) { return hex64(fnv1a(read_file_bytes(p))); }

}  // namespace flowlens
