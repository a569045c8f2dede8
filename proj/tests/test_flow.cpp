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

#include <gtest/gtest.h>

#include <numeric>

#include "flowlens/flow.hpp"
#include "flowlens/synth.hpp"
#include "oracles.hpp"

using namespace flowlens;

namespace {

PacketFields pkt(std::int64_t t_us, bool forward = true, std::uint8_t proto = ipproto::kTcp, std::uint8_t flags = 0) {
    PacketFields p;
    p.timestamp_us = t_us;
    p.ip_protocol = proto;
    p.total_length = 100;
    p.tcp_flags = flags;
    const Address a = ipv4_address(10, 0, 0, 1), b = ipv4_address(10, 0, 0, 2);
    p.src_addr = forward ? a : b;
    p.dst_addr = forward ? b : a;
    p.src_port = forward ? 1234 : 80;
    p.dst_port = forward ? 80 : 1234;
    return p;
}

}  // namespace

TEST(FlowKey, SymmetricUnderReversal) {
    EXPECT_EQ(flow_key(pkt(0, true)), flow_key(pkt(0, false)));
}

TEST(FlowKey, ProtocolIsPartOfKey) {
    EXPECT_FALSE(flow_key(pkt(0, true, ipproto::kTcp)) == flow_key(pkt(0, true, ipproto::kUdp)));
}

TEST(Assemble, GapBeyondTimeoutSplits) {
    const std::vector<PacketFields> ps = {pkt(0), pkt(200'000'000)};
    const auto flows = assemble_flows(ps);
    ASSERT_EQ(flows.size(), 2u);
    EXPECT_EQ(flows[0].size(), 1u);
    EXPECT_EQ(flows[1].size(), 1u);
}

TEST(Assemble, TimeoutIsStrictAndFromFlowStart) {
    // Exactly 120 s after start stays; activity does not extend the lifetime.
    const std::vector<PacketFields> ps = {pkt(0), pkt(60'000'000), pkt(120'000'000), pkt(120'000'001)};
    const auto flows = assemble_flows(ps);
    ASSERT_EQ(flows.size(), 2u);
    EXPECT_EQ(flows[0].size(), 3u);
    EXPECT_EQ(flows[1].size(), 1u);
}

TEST(Assemble, CapsAtThirtyTwoPackets) {
    std::vector<PacketFields> ps;
    for (int i = 0; i < 40; ++i) {
        ps.push_back(pkt(i * 1000));
    }
    AssemblyStats stats;
    const auto flows = assemble_flows(ps, {}, {}, &stats);
    ASSERT_EQ(flows.size(), 1u);
    EXPECT_EQ(flows[0].size(), 32u);
    EXPECT_EQ(flows[0].dropped, 8u);
    EXPECT_EQ(stats.packets_dropped_after_cap, 8u);
    EXPECT_EQ(stats.packets_in_sequences + stats.packets_dropped_after_cap, stats.packets);
}

TEST(Assemble, FinClosesAfterInclusion) {
    const std::vector<PacketFields> ps = {pkt(0), pkt(10, false, ipproto::kTcp, tcpflag::kFin | tcpflag::kAck),
                                          pkt(20)};
    const auto flows = assemble_flows(ps);
    ASSERT_EQ(flows.size(), 2u);
    EXPECT_EQ(flows[0].size(), 2u);
    EXPECT_EQ(flows[0].packets[1].tcp_flags & tcpflag::kFin, tcpflag::kFin);
    EXPECT_EQ(flows[1].size(), 1u);
}

TEST(Assemble, UdpFlagByteDoesNotClose) {
    const std::vector<PacketFields> ps = {pkt(0, true, ipproto::kUdp), pkt(10, false, ipproto::kUdp)};
    EXPECT_EQ(assemble_flows(ps).size(), 1u);
}

TEST(Direction, InitiatorIsForward) {
    const std::vector<PacketFields> ps = {pkt(0, false), pkt(1, true), pkt(2, false), pkt(3, true)};
    const auto flows = assemble_flows(ps);
    ASSERT_EQ(flows.size(), 1u);
    const auto& p = flows[0].packets;
    EXPECT_EQ(p[0].direction, Direction::kForward);
    EXPECT_EQ(p[1].direction, Direction::kBackward);
    EXPECT_EQ(p[2].direction, Direction::kForward);
    EXPECT_EQ(p[3].direction, Direction::kBackward);
}

TEST(Iat, Examples) {
    EXPECT_EQ(iat_of(500'000, 0), 0.5);
    EXPECT_EQ(iat_of(999'000, 1'000'000), 0.0);

    const std::vector<PacketFields> two = {pkt(0), pkt(500'000)};
    auto f = assemble_flows(two);
    EXPECT_EQ(f[0].packets[0].iat, 0.0);
    EXPECT_DOUBLE_EQ(f[0].packets[1].iat, 0.5);

    const std::vector<PacketFields> jitter = {pkt(1'000'000), pkt(999'000)};
    f = assemble_flows(jitter);
    EXPECT_EQ(f[0].packets[0].iat, 0.0);
    EXPECT_EQ(f[0].packets[1].iat, 0.0);

    std::vector<PacketFields> spaced;
    for (int i = 0; i < 5; ++i) {
        spaced.push_back(pkt(i * 10'000));
    }
    f = assemble_flows(spaced);
    for (int i = 1; i < 5; ++i) {
        EXPECT_DOUBLE_EQ(f[0].packets[i].iat, 0.01);
    }
}

TEST(Assemble, MatchesRuleReplayOracle) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto trace = stress_trace(seed, 3000);
        const auto got = assemble_flows(trace);
        const auto want = oracle::assemble(trace);
        ASSERT_EQ(got.size(), want.size()) << "seed " << seed;
        for (std::size_t i = 0; i < got.size(); ++i) {
            ASSERT_EQ(got[i].packets, want[i].packets) << "seed " << seed << " flow " << i;
            ASSERT_EQ(got[i].start_us, want[i].start_us);
            ASSERT_EQ(got[i].dropped, want[i].dropped);
        }
    }
}

TEST(Assemble, InvariantsOnStressTraces) {
    for (std::uint64_t seed = 100; seed < 110; ++seed) {
        const auto trace = stress_trace(seed, 5000);
        AssemblyStats stats;
        const auto flows = assemble_flows(trace, {}, {}, &stats);
        std::size_t in_seq = 0, dropped = 0;
        for (const auto& f : flows) {
            ASSERT_GE(f.size(), 1u);
            ASSERT_LE(f.size(), 32u);
            EXPECT_EQ(f.packets[0].iat, 0.0);
            EXPECT_EQ(f.packets[0].direction, Direction::kForward);
            double total = 0.0;
            for (const auto& p : f.packets) {
                EXPECT_GE(p.iat, 0.0);
                EXPECT_EQ(p.protocol, f.packets[0].protocol);
                total += p.iat;
            }
            EXPECT_LE(total, 120.0 + 1e-9);
            in_seq += f.size();
            dropped += f.dropped;
        }
        // Partition: every packet is counted exactly once.
        EXPECT_EQ(in_seq + dropped, trace.size());
        EXPECT_EQ(stats.packets, trace.size());
    }
}

TEST(Assemble, Deterministic) {
    const auto trace = stress_trace(77, 4000);
    EXPECT_EQ(assemble_flows(trace), assemble_flows(trace));
}

TEST(Assemble, EvictionEmitsOldestFlow) {
    AssemblyOptions opt;
    opt.max_active_flows = 2;
    std::vector<PacketFields> ps;
    for (int i = 0; i < 3; ++i) {
        auto p = pkt(i);
        p.src_port = static_cast<std::uint16_t>(2000 + i);
        ps.push_back(p);
    }
    auto first_again = ps[0];
    first_again.timestamp_us = 10;
    ps.push_back(first_again);
    AssemblyStats stats;
    const auto flows = assemble_flows(ps, opt, {}, &stats);
    EXPECT_EQ(stats.evicted, 2u);
    EXPECT_EQ(flows.size(), 4u);
}

TEST(Assemble, GeneratorManifestRecovered) {
    TrafficProfile prof;
    prof.flows = 100;
    prof.seed = 4;
    const auto cap = generate(prof);
    const auto parsed = parse_pcap(cap.pcap);
    const auto flows = assemble_flows(parsed.packets, {}, cap.labels.labeler());
    ASSERT_EQ(flows.size(), 100u);
    for (std::size_t i = 0; i < flows.size(); ++i) {
        const auto& m = cap.manifest[i];
        ASSERT_EQ(flows[i].size(), m.packets.size());
        ASSERT_TRUE(flows[i].label.has_value());
        EXPECT_EQ(*flows[i].label, m.label);
        for (std::size_t k = 0; k < m.packets.size(); ++k) {
            EXPECT_EQ(flows[i].packets[k].direction, m.packets[k].direction);
            EXPECT_EQ(flows[i].packets[k].length, m.packets[k].length);
        }
    }
}
