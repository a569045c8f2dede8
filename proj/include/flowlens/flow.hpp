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
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "flowlens/address.hpp"
#include "flowlens/pcap.hpp"

namespace flowlens {

enum class Direction : std::uint8_t { kForward = 0, kBackward = 1 };
enum class Label : std::uint8_t { kBenign = 0, kMalicious = 1 };

inline const char* label_name(Label l) { return l == Label::kMalicious ? "malicious" : "benign"; }

struct Endpoint {
    Address addr{};
    std::uint16_t port = 0;

    friend auto operator<=>(const Endpoint&, const Endpoint&) = default;
};

/// Direction-independent 5-tuple: the two endpoints in canonical order plus
/// the IP protocol.
struct FlowKey {
    Endpoint lo;
    Endpoint hi;
    std::uint8_t protocol = 0;

    friend bool operator==(const FlowKey&, const FlowKey&) = default;
};

struct FlowKeyHash {
    std::size_t operator()(const FlowKey& k) const noexcept {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](std::uint8_t b) {
            h ^= b;
            h *= 0x100000001b3ULL;
        };
        for (const Endpoint* e : {&k.lo, &k.hi}) {
            for (auto b : e->addr) {
                feed(b);
            }
            feed(static_cast<std::uint8_t>(e->port >> 8));
            feed(static_cast<std::uint8_t>(e->port));
        }
        feed(k.protocol);
        return static_cast<std::size_t>(h);
    }
};

inline Endpoint source_of(const PacketFields& p) { return {p.src_addr, p.src_port}; }
inline Endpoint destination_of(const PacketFields& p) { return {p.dst_addr, p.dst_port}; }

inline FlowKey make_flow_key(const Endpoint& a, const Endpoint& b, std::uint8_t protocol) {
    return a <= b ? FlowKey{a, b, protocol} : FlowKey{b, a, protocol};
}

inline FlowKey flow_key(const PacketFields& p) { return make_flow_key(source_of(p), destination_of(p), p.ip_protocol); }

inline Direction direction_of(const PacketFields& p, const Endpoint& initiator) {
    return source_of(p) == initiator ? Direction::kForward : Direction::kBackward;
}

/// Inter-arrival time in seconds, clamped at zero for out-of-order capture.
inline double iat_of(std::int64_t current_us, std::int64_t previous_us) {
    return current_us > previous_us ? static_cast<double>(current_us - previous_us) * 1e-6 : 0.0;
}

/// One packet of a de-identified flow.
struct PacketRecord {
    std::uint8_t protocol = 0;
    std::uint32_t length = 0;
    std::uint8_t tcp_flags = 0;
    double iat = 0.0;
    Direction direction = Direction::kForward;

    friend bool operator==(const PacketRecord&, const PacketRecord&) = default;
};

/// Truncated packet sequence of one flow. Carries no address or port.
struct FlowSequence {
    std::uint64_t id = 0;
    std::int64_t start_us = 0;
    std::vector<PacketRecord> packets;
    std::optional<Label> label;
    std::string attack;
    /// Packets of this flow discarded after the packet cap was reached.
    std::uint32_t dropped = 0;

    [[nodiscard]] std::size_t size() const { return packets.size(); }

    friend bool operator==(const FlowSequence&, const FlowSequence&) = default;
};

struct LabelInfo {
    std::optional<Label> label;
    std::string attack;
};

/// Called once per new flow, while endpoints are still known.
using Labeler = std::function<LabelInfo(const FlowKey& key, const Endpoint& initiator, const Endpoint& responder,
                                        std::int64_t start_us)>;

struct AssemblyOptions {
    /// Fixed lifetime measured from the first packet (not an idle timeout).
    std::int64_t timeout_us = 120'000'000;
    std::size_t max_packets = 32;
    std::size_t max_active_flows = std::size_t{1} << 20;
    bool close_on_fin_rst = true;
};

struct AssemblyStats {
    std::size_t packets = 0;
    std::size_t packets_in_sequences = 0;
    std::size_t packets_dropped_after_cap = 0;
    std::size_t flows = 0;
    std::size_t evicted = 0;
};

/// Streaming flow table. Rules, in order, for a packet whose key has an
/// active flow: a closed flow or one older than the timeout is emitted and a
/// new flow starts; a full flow drops the packet; otherwise the packet is
/// appended, and a TCP FIN or RST closes the flow after inclusion.
class FlowAssembler {
public:
    explicit FlowAssembler(AssemblyOptions options = {}, Labeler labeler = {})
        : options_(options), labeler_(std::move(labeler)) {}

    void add(const PacketFields& p) {
        ++stats_.packets;
        const FlowKey key = flow_key(p);
        auto it = active_.find(key);
        if (it != active_.end()) {
            Active& a = it->second;
            if (p.timestamp_us - a.seq.start_us > options_.timeout_us) {
                emit(it);
                it = active_.end();
            }
        }
        if (it == active_.end()) {
            if (active_.size() >= options_.max_active_flows && !by_id_.empty()) {
                ++stats_.evicted;
                emit(active_.find(by_id_.begin()->second));
            }
            Active a;
            a.initiator = source_of(p);
            a.seq.id = next_id_++;
            a.seq.start_us = p.timestamp_us;
            a.latest_us = p.timestamp_us;
            if (labeler_) {
                LabelInfo li = labeler_(key, a.initiator, destination_of(p), p.timestamp_us);
                a.seq.label = li.label;
                a.seq.attack = std::move(li.attack);
            }
            by_id_.emplace(a.seq.id, key);
            it = active_.emplace(key, std::move(a)).first;
        }

        Active& a = it->second;
        if (a.seq.packets.size() >= options_.max_packets) {
            ++a.seq.dropped;
            ++stats_.packets_dropped_after_cap;
            return;
        }
        PacketRecord rec;
        rec.protocol = p.ip_protocol;
        rec.length = p.total_length;
        rec.tcp_flags = p.tcp_flags;
        rec.direction = direction_of(p, a.initiator);
        rec.iat = a.seq.packets.empty() ? 0.0 : iat_of(p.timestamp_us, a.latest_us);
        a.latest_us = std::max(a.latest_us, p.timestamp_us);
        a.seq.packets.push_back(rec);
        ++stats_.packets_in_sequences;
        if (options_.close_on_fin_rst && p.ip_protocol == ipproto::kTcp &&
            (p.tcp_flags & (tcpflag::kFin | tcpflag::kRst)) != 0) {
            emit(it);
        }
    }

    /// Emits every remaining flow. Output is ordered by flow id (creation
    /// order).
    std::vector<FlowSequence> finish() {
        while (!active_.empty()) {
            emit(active_.begin());
        }
        std::sort(done_.begin(), done_.end(),
                  [](const FlowSequence& a, const FlowSequence& b) { return a.id < b.id; });
        stats_.flows = done_.size();
        return std::move(done_);
    }

    [[nodiscard]] const AssemblyStats& stats() const { return stats_; }

private:
    struct Active {
        FlowSequence seq;
        Endpoint initiator;
        std::int64_t latest_us = 0;
    };
    using Table = std::unordered_map<FlowKey, Active, FlowKeyHash>;

    void emit(Table::iterator it) {
        by_id_.erase(it->second.seq.id);
        done_.push_back(std::move(it->second.seq));
        active_.erase(it);
    }

    AssemblyOptions options_;
    Labeler labeler_;
    Table active_;
    std::map<std::uint64_t, FlowKey> by_id_;
    std::vector<FlowSequence> done_;
    AssemblyStats stats_;
    std::uint64_t next_id_ = 0;
};

inline std::vector<FlowSequence> assemble_flows(std::span<const PacketFields> packets, AssemblyOptions options = {},
                                                Labeler labeler = {}, AssemblyStats* stats = nullptr) {
    FlowAssembler fa(options, std::move(labeler));
    for (const auto& p : packets) {
        fa.add(p);
    }
    auto flows = fa.finish();
    if (stats) {
        *stats = fa.stats();
    }
    return flows;
}

}  // namespace flowlens
