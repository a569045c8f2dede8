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
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowlens/address.hpp"
#include "flowlens/flow.hpp"
#include "flowlens/labels.hpp"
#include "flowlens/pcap.hpp"
#include "flowlens/pcap_writer.hpp"
#include "flowlens/rng.hpp"

namespace flowlens {

enum class Archetype : std::uint8_t { kWeb, kBulk, kDns, kPing, kFlood, kScan, kBruteForce, kExfil };

inline constexpr std::array<Archetype, 4> kBenignArchetypes = {Archetype::kWeb, Archetype::kBulk, Archetype::kDns,
                                                               Archetype::kPing};
/// Flood and scan are structurally obvious; brute-force and exfiltration
/// reuse the web and bulk handshakes and differ only in sizes, counts,
/// timing and direction.
inline constexpr std::array<Archetype, 4> kMaliciousArchetypes = {Archetype::kFlood, Archetype::kScan,
                                                                  Archetype::kBruteForce, Archetype::kExfil};

inline const char* archetype_name(Archetype a) {
    switch (a) {
        case Archetype::kWeb:
            return "web";
        case Archetype::kBulk:
            return "bulk";
        case Archetype::kDns:
            return "dns";
        case Archetype::kPing:
            return "ping";
        case Archetype::kFlood:
            return "flood";
        case Archetype::kScan:
            return "scan";
        case Archetype::kBruteForce:
            return "bruteforce";
        case Archetype::kExfil:
            return "exfil";
    }
    return "unknown";
}

/// Parameters of a synthetic capture. `separation` is the probability that a
/// malicious flow follows a malicious archetype; otherwise it is drawn from
/// the benign mixture, so 0 makes the classes indistinguishable. `shift`
/// in [0, 1] moves the benign distributions (timing, sizes, mix) to emulate a
/// second capture domain.
struct TrafficProfile {
    std::size_t flows = 1000;
    double malicious_fraction = 0.5;
    double separation = 1.0;
    double shift = 0.0;
    std::array<double, 4> benign_mix = {0.55, 0.2, 0.2, 0.05};
    std::array<double, 4> malicious_mix = {0.5, 0.5, 0.0, 0.0};  // flood, scan, bruteforce, exfil
    double mean_flow_gap_s = 0.02;
    std::uint64_t seed = 1;

    void validate() const {
        if (flows == 0) {
            throw std::invalid_argument("TrafficProfile: zero flows requested");
        }
        auto check_mix = [](auto& mix, const char* what) {
            double s = 0.0;
            for (double w : mix) {
                if (!(w >= 0.0)) {
                    throw std::invalid_argument(std::string("TrafficProfile: negative weight in ") + what);
                }
                s += w;
            }
            if (std::abs(s - 1.0) > 1e-9) {
                throw std::invalid_argument(std::string("TrafficProfile: ") + what + " must sum to 1");
            }
        };
        check_mix(benign_mix, "benign_mix");
        check_mix(malicious_mix, "malicious_mix");
        for (double v : {malicious_fraction, separation, shift}) {
            if (!(v >= 0.0 && v <= 1.0)) {
                throw std::invalid_argument("TrafficProfile: fractions must lie in [0, 1]");
            }
        }
        if (!(mean_flow_gap_s > 0.0)) {
            throw std::invalid_argument("TrafficProfile: mean_flow_gap_s must be > 0");
        }
    }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"flows", flows},           {"malicious_fraction", malicious_fraction},
                {"separation", separation}, {"shift", shift},
                {"benign_mix", benign_mix}, {"malicious_mix", malicious_mix},
                {"mean_flow_gap_s", mean_flow_gap_s}, {"seed", seed}};
    }

    static TrafficProfile from_json(const nlohmann::json& j) {
        TrafficProfile p;
        p.flows = j.value("flows", p.flows);
        p.malicious_fraction = j.value("malicious_fraction", p.malicious_fraction);
        p.separation = j.value("separation", p.separation);
        p.shift = j.value("shift", p.shift);
        p.benign_mix = j.value("benign_mix", p.benign_mix);
        p.malicious_mix = j.value("malicious_mix", p.malicious_mix);
        p.mean_flow_gap_s = j.value("mean_flow_gap_s", p.mean_flow_gap_s);
        p.seed = j.value("seed", p.seed);
        p.validate();
        return p;
    }
};

struct SynthPacket {
    std::int64_t timestamp_us = 0;
    std::uint32_t length = 0;
    std::uint8_t tcp_flags = 0;
    Direction direction = Direction::kForward;

    friend bool operator==(const SynthPacket&, const SynthPacket&) = default;
};

struct ManifestFlow {
    std::uint64_t id = 0;
    Endpoint client;
    Endpoint server;
    std::uint8_t protocol = ipproto::kTcp;
    Archetype archetype = Archetype::kWeb;
    Label label = Label::kBenign;
    std::vector<SynthPacket> packets;

    [[nodiscard]] std::int64_t start_us() const { return packets.front().timestamp_us; }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json pk = nlohmann::json::array();
        for (const auto& p : packets) {
            pk.push_back({p.timestamp_us, p.length, p.tcp_flags, static_cast<int>(p.direction)});
        }
        return {{"id", id},
                {"src", format_address(client.addr)},
                {"src_port", client.port},
                {"dst", format_address(server.addr)},
                {"dst_port", server.port},
                {"protocol", protocol},
                {"archetype", archetype_name(archetype)},
                {"label", label_name(label)},
                {"packets", std::move(pk)}};
    }
};

struct SynthCapture {
    std::vector<std::uint8_t> pcap;
    std::vector<ManifestFlow> manifest;
    LabelRules labels;
    std::size_t packet_count = 0;
};

namespace synth_detail {

inline std::size_t pick(const double* weights, std::size_t n, Rng& rng) {
    double u = rng.uniform();
    for (std::size_t i = 0; i + 1 < n; ++i) {
        if (u < weights[i]) {
            return i;
        }
        u -= weights[i];
    }
    return n - 1;
}

inline std::int64_t lognormal_us(Rng& rng, double median_s, double sigma) {
    const double v = median_s * std::exp(sigma * rng.normal());
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(std::min(v, 5.0) * 1e6)));
}

inline std::uint32_t uniform_len(Rng& rng, double lo, double hi) {
    return static_cast<std::uint32_t>(std::llround(rng.uniform(lo, hi)));
}

class FlowBuilder {
public:
    explicit FlowBuilder(std::int64_t start) : t_(start) {}

    void emit(std::int64_t gap_us, std::uint32_t len, std::uint8_t flags, Direction d) {
        t_ += packets.empty() ? 0 : gap_us;
        packets.push_back({t_, len, flags, d});
    }

    std::vector<SynthPacket> packets;

private:
    std::int64_t t_;
};

using namespace tcpflag;
constexpr auto kFwd = Direction::kForward;
constexpr auto kBwd = Direction::kBackward;

inline std::vector<SynthPacket> web_flow(std::int64_t t0, double shift, Rng& rng) {
    FlowBuilder b(t0);
    const double rtt = 0.02 * (1.0 + 3.0 * shift);
    b.emit(0, 60, kSyn, kFwd);
    b.emit(lognormal_us(rng, rtt, 0.3), 60, kSyn | kAck, kBwd);
    b.emit(lognormal_us(rng, 0.0005, 0.3), 52, kAck, kFwd);
    b.emit(lognormal_us(rng, 0.001, 0.5), uniform_len(rng, 200 * (1 + shift), 600 * (1 + shift)), kPsh | kAck, kFwd);
    const auto responses = 1 + rng.below(static_cast<std::uint64_t>(5 + std::llround(2 * shift)));
    for (std::uint64_t i = 0; i < responses; ++i) {
        b.emit(lognormal_us(rng, i == 0 ? rtt : 0.0008, 0.4),
               uniform_len(rng, 600 * (1 - 0.4 * shift), 1500 * (1 - 0.4 * shift)), kAck | (i + 1 == responses ? kPsh : 0),
               kBwd);
        if (i % 2 == 1) {
            b.emit(lognormal_us(rng, 0.0004, 0.3), 52, kAck, kFwd);
        }
    }
    b.emit(lognormal_us(rng, 0.05 * (1 + shift), 0.8), 52, kFin | kAck, kFwd);
    return std::move(b.packets);
}

inline std::vector<SynthPacket> bulk_flow(std::int64_t t0, double shift, Rng& rng) {
    FlowBuilder b(t0);
    const double rtt = 0.03 * (1.0 + 2.0 * shift);
    const std::uint32_t mss_len = shift > 0.5 ? 1280 : 1500;
    b.emit(0, 60, kSyn, kFwd);
    b.emit(lognormal_us(rng, rtt, 0.3), 60, kSyn | kAck, kBwd);
    b.emit(lognormal_us(rng, 0.0005, 0.3), 52, kAck, kFwd);
    b.emit(lognormal_us(rng, 0.001, 0.3), uniform_len(rng, 100, 300), kPsh | kAck, kFwd);
    const auto segments = 8 + rng.below(12);
    for (std::uint64_t i = 0; i < segments; ++i) {
        b.emit(lognormal_us(rng, 0.0002 * (1 + shift), 0.5), mss_len, kAck, kBwd);
        if (i % 3 == 2) {
            b.emit(lognormal_us(rng, 0.0001, 0.3), 52, kAck, kFwd);
        }
    }
    b.emit(lognormal_us(rng, 0.01, 0.5), 52, kFin | kAck, kFwd);
    return std::move(b.packets);
}

inline std::vector<SynthPacket> dns_flow(std::int64_t t0, double shift, Rng& rng) {
    FlowBuilder b(t0);
    b.emit(0, uniform_len(rng, 60, 90), 0, kFwd);
    b.emit(lognormal_us(rng, 0.015 * (1 + 4 * shift), 0.6), uniform_len(rng, 90, 300 + 200 * shift), 0, kBwd);
    return std::move(b.packets);
}

inline std::vector<SynthPacket> ping_flow(std::int64_t t0, double shift, Rng& rng) {
    FlowBuilder b(t0);
    const auto pairs = 1 + rng.below(4);
    for (std::uint64_t i = 0; i < pairs; ++i) {
        b.emit(1'000'000, 84, 0, kFwd);
        b.emit(lognormal_us(rng, 0.02 * (1 + 2 * shift), 0.3), 84, 0, kBwd);
    }
    return std::move(b.packets);
}

inline std::vector<SynthPacket> flood_flow(std::int64_t t0, bool tcp, Rng& rng) {
    FlowBuilder b(t0);
    const auto count = 8 + rng.below(17);
    const auto gap = static_cast<std::int64_t>(200 + rng.below(1800));
    const std::uint32_t len = tcp ? 40 : 60;
    for (std::uint64_t i = 0; i < count; ++i) {
        b.emit(gap, len, tcp ? kSyn : 0, kFwd);
    }
    return std::move(b.packets);
}

inline std::vector<SynthPacket> scan_flow(std::int64_t t0, Rng& rng) {
    FlowBuilder b(t0);
    b.emit(0, 44, kSyn, kFwd);
    if (rng.uniform() < 0.3) {
        b.emit(lognormal_us(rng, 0.001, 0.5), 40, kRst | kAck, kBwd);
    }
    return std::move(b.packets);
}

/// Login attempt: web handshake, one mid-sized request, a single short
/// rejection and a quick client close.
inline std::vector<SynthPacket> bruteforce_flow(std::int64_t t0, double shift, Rng& rng) {
    FlowBuilder b(t0);
    const double rtt = 0.02 * (1.0 + 3.0 * shift);
    b.emit(0, 60, kSyn, kFwd);
    b.emit(lognormal_us(rng, rtt, 0.3), 60, kSyn | kAck, kBwd);
    b.emit(lognormal_us(rng, 0.0005, 0.3), 52, kAck, kFwd);
    b.emit(lognormal_us(rng, 0.001, 0.5), uniform_len(rng, 380 * (1 + shift), 460 * (1 + shift)), kPsh | kAck, kFwd);
    b.emit(lognormal_us(rng, rtt, 0.4), uniform_len(rng, 350, 700), kPsh | kAck, kBwd);
    b.emit(lognormal_us(rng, 0.003, 0.5), 52, kFin | kAck, kFwd);
    return std::move(b.packets);
}

/// Bulk transfer in the wrong direction: the client uploads.
inline std::vector<SynthPacket> exfil_flow(std::int64_t t0, double shift, Rng& rng) {
    FlowBuilder b(t0);
    const double rtt = 0.03 * (1.0 + 2.0 * shift);
    const std::uint32_t mss_len = shift > 0.5 ? 1280 : 1500;
    b.emit(0, 60, kSyn, kFwd);
    b.emit(lognormal_us(rng, rtt, 0.3), 60, kSyn | kAck, kBwd);
    b.emit(lognormal_us(rng, 0.0005, 0.3), 52, kAck, kFwd);
    b.emit(lognormal_us(rng, 0.001, 0.3), uniform_len(rng, 100, 300), kPsh | kAck, kBwd);
    const auto segments = 8 + rng.below(12);
    for (std::uint64_t i = 0; i < segments; ++i) {
        b.emit(lognormal_us(rng, 0.0002 * (1 + shift), 0.5), mss_len, kAck, kFwd);
        if (i % 3 == 2) {
            b.emit(lognormal_us(rng, 0.0001, 0.3), 52, kAck, kBwd);
        }
    }
    b.emit(lognormal_us(rng, 0.01, 0.5), 52, kFin | kAck, kFwd);
    return std::move(b.packets);
}

}  // namespace synth_detail

/// Deterministic capture plus per-flow ground truth. Every flow has a unique
/// 5-tuple, at most 32 packets and a lifetime well under the flow timeout.
inline SynthCapture generate(const TrafficProfile& profile) {
    using namespace synth_detail;
    profile.validate();
    const Rng root(profile.seed, 0x5717);
    const auto span_us =
        static_cast<std::int64_t>(std::llround(profile.mean_flow_gap_s * 1e6 * static_cast<double>(profile.flows)));
    std::vector<ManifestFlow> flows;
    flows.reserve(profile.flows);
    const auto n_malicious = static_cast<std::size_t>(
        std::llround(profile.malicious_fraction * static_cast<double>(profile.flows)));
    for (std::size_t i = 0; i < profile.flows; ++i) {
        Rng rng = root.split(i + 1);
        ManifestFlow f;
        f.label = i < n_malicious ? Label::kMalicious : Label::kBenign;
        if (f.label == Label::kMalicious && rng.uniform() < profile.separation) {
            f.archetype = kMaliciousArchetypes[pick(profile.malicious_mix.data(), 4, rng)];
        } else {
            f.archetype = kBenignArchetypes[pick(profile.benign_mix.data(), 4, rng)];
        }
        const auto t0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(std::max<std::int64_t>(span_us, 1))));
        const std::uint32_t host = static_cast<std::uint32_t>(i) + 1;
        f.client.addr = ipv4_address(10, static_cast<std::uint8_t>((host >> 16) & 0xff),
                                     static_cast<std::uint8_t>((host >> 8) & 0xff), static_cast<std::uint8_t>(host & 0xff));
        f.client.port = static_cast<std::uint16_t>(1024 + rng.below(60000));
        f.server.addr = ipv4_address(192, 168, static_cast<std::uint8_t>(1 + profile.shift * 100),
                                     static_cast<std::uint8_t>(1 + rng.below(50)));
        switch (f.archetype) {
            case Archetype::kWeb:
                f.protocol = ipproto::kTcp;
                f.server.port = 443;
                f.packets = web_flow(t0, profile.shift, rng);
                break;
            case Archetype::kBulk:
                f.protocol = ipproto::kTcp;
                f.server.port = 8080;
                f.packets = bulk_flow(t0, profile.shift, rng);
                break;
            case Archetype::kDns:
                f.protocol = ipproto::kUdp;
                f.server.port = 53;
                f.packets = dns_flow(t0, profile.shift, rng);
                break;
            case Archetype::kPing:
                f.protocol = ipproto::kIcmp;
                f.client.port = 0;
                f.server.port = 0;
                f.packets = ping_flow(t0, profile.shift, rng);
                break;
            case Archetype::kFlood: {
                const bool tcp = rng.uniform() < 0.5;
                f.protocol = tcp ? ipproto::kTcp : ipproto::kUdp;
                f.server.port = tcp ? 80 : 123;
                f.packets = flood_flow(t0, tcp, rng);
                break;
            }
            case Archetype::kScan:
                f.protocol = ipproto::kTcp;
                f.server.port = static_cast<std::uint16_t>(1 + rng.below(1024));
                f.packets = scan_flow(t0, rng);
                break;
            case Archetype::kBruteForce:
                f.protocol = ipproto::kTcp;
                f.server.port = 443;
                f.packets = bruteforce_flow(t0, profile.shift, rng);
                break;
            case Archetype::kExfil:
                f.protocol = ipproto::kTcp;
                f.server.port = 8080;
                f.packets = exfil_flow(t0, profile.shift, rng);
                break;
        }
        flows.push_back(std::move(f));
    }
    // Flow ids follow start order so they line up with assembly output.
    std::stable_sort(flows.begin(), flows.end(),
                     [](const ManifestFlow& a, const ManifestFlow& b) { return a.start_us() < b.start_us(); });
    struct Event {
        std::int64_t t;
        std::uint32_t flow;
        std::uint32_t packet;
    };
    std::vector<Event> events;
    std::vector<LabelRule> rules;
    for (std::size_t i = 0; i < flows.size(); ++i) {
        flows[i].id = i;
        for (std::size_t k = 0; k < flows[i].packets.size(); ++k) {
            events.push_back({flows[i].packets[k].timestamp_us, static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(k)});
        }
        LabelRule r;
        r.label = flows[i].label;
        r.attack = flows[i].label == Label::kMalicious ? archetype_name(flows[i].archetype) : "";
        r.src = flows[i].client.addr;
        r.dst = flows[i].server.addr;
        r.src_port = flows[i].client.port;
        r.dst_port = flows[i].server.port;
        r.protocol = flows[i].protocol;
        rules.push_back(std::move(r));
    }
    std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
        if (a.t != b.t) {
            return a.t < b.t;
        }
        return a.flow != b.flow ? a.flow < b.flow : a.packet < b.packet;
    });
    SynthCapture out;
    PcapWriter writer(LinkType::kEthernet);
    for (const auto& e : events) {
        const auto& f = flows[e.flow];
        const auto& p = f.packets[e.packet];
        const bool fwd = p.direction == Direction::kForward;
        PacketSpec s;
        s.timestamp_us = p.timestamp_us;
        s.src_addr = fwd ? f.client.addr : f.server.addr;
        s.dst_addr = fwd ? f.server.addr : f.client.addr;
        s.src_port = fwd ? f.client.port : f.server.port;
        s.dst_port = fwd ? f.server.port : f.client.port;
        s.ip_protocol = f.protocol;
        s.tcp_flags = p.tcp_flags;
        s.total_length = p.length;
        writer.write_packet(s);
    }
    out.packet_count = events.size();
    out.pcap = writer.take();
    out.manifest = std::move(flows);
    out.labels = LabelRules(std::move(rules), std::nullopt);
    return out;
}

/// Writes capture.pcap, manifest.jsonl and labels.json into `dir`.
inline void write_synth(const SynthCapture& cap, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream os(dir / "capture.pcap", std::ios::binary | std::ios::trunc);
        os.write(reinterpret_cast<const char*>(cap.pcap.data()), static_cast<std::streamsize>(cap.pcap.size()));
        if (!os) {
            throw std::runtime_error("cannot write " + (dir / "capture.pcap").string());
        }
    }
    {
        std::ofstream os(dir / "manifest.jsonl", std::ios::trunc);
        for (const auto& f : cap.manifest) {
            os << f.to_json().dump() << '\n';
        }
    }
    {
        std::ofstream os(dir / "labels.json", std::ios::trunc);
        os << cap.labels.to_json().dump(1) << '\n';
    }
}

/// Randomized packet stream that exercises every assembly rule: key reuse in
/// both directions, gaps beyond the timeout, runs longer than the packet cap,
/// FIN/RST closures and small timestamp jitter.
inline std::vector<PacketFields> stress_trace(std::uint64_t seed, std::size_t packets, std::size_t endpoints = 24) {
    Rng rng(seed, 0x7ace);
    struct Pair {
        Endpoint a, b;
        std::uint8_t proto;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < endpoints; ++i) {
        const std::uint8_t protos[] = {ipproto::kTcp, ipproto::kTcp, ipproto::kUdp, ipproto::kIcmp};
        const std::uint8_t proto = protos[rng.below(4)];
        const bool ports = proto != ipproto::kIcmp;
        Pair p{{ipv4_address(10, 0, 0, static_cast<std::uint8_t>(1 + rng.below(6))),
                static_cast<std::uint16_t>(ports ? 1000 + rng.below(4) : 0)},
               {ipv4_address(10, 0, 1, static_cast<std::uint8_t>(1 + rng.below(3))),
                static_cast<std::uint16_t>(ports ? 80 + rng.below(2) : 0)},
               proto};
        pairs.push_back(p);
    }
    std::vector<PacketFields> out;
    out.reserve(packets);
    std::int64_t t = 1'000'000;
    std::size_t current = 0;
    while (out.size() < packets) {
        const double r = rng.uniform();
        if (r < 0.6) {
            // keep the current pair: long runs push past the packet cap
        } else {
            current = static_cast<std::size_t>(rng.below(pairs.size()));
        }
        const double g = rng.uniform();
        if (g < 0.01) {
            t += 100'000'000 + static_cast<std::int64_t>(rng.below(60'000'000));  // around the timeout
        } else if (g < 0.03) {
            t -= static_cast<std::int64_t>(rng.below(2000));  // capture jitter
        } else {
            t += static_cast<std::int64_t>(rng.below(3'000'000));
        }
        const Pair& pr = pairs[current];
        const bool fwd = rng.uniform() < 0.6;
        PacketFields p;
        p.timestamp_us = t;
        p.ip_protocol = pr.proto;
        p.src_addr = fwd ? pr.a.addr : pr.b.addr;
        p.dst_addr = fwd ? pr.b.addr : pr.a.addr;
        p.src_port = fwd ? pr.a.port : pr.b.port;
        p.dst_port = fwd ? pr.b.port : pr.a.port;
        p.total_length = static_cast<std::uint32_t>(40 + rng.below(1461));
        if (pr.proto == ipproto::kTcp) {
            auto flags = static_cast<std::uint8_t>(tcpflag::kAck | (rng.uniform() < 0.3 ? tcpflag::kPsh : 0));
            const double c = rng.uniform();
            if (c < 0.02) {
                flags |= tcpflag::kFin;
            } else if (c < 0.03) {
                flags |= tcpflag::kRst;
            }
            p.tcp_flags = flags;
        }
        out.push_back(p);
    }
    return out;
}

}  // namespace flowlens
