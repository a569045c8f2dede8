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
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "flowlens/address.hpp"
#include "flowlens/pcap.hpp"

namespace flowlens {

/// What to synthesize for one packet. Payload bytes are zeros.
struct PacketSpec {
    std::int64_t timestamp_us = 0;
    Address src_addr{};
    Address dst_addr{};
    std::uint8_t ip_protocol = ipproto::kTcp;
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    std::uint8_t tcp_flags = 0;
    std::uint32_t total_length = 0;
};

inline std::size_t transport_header_size(std::uint8_t proto) {
    switch (proto) {
        case ipproto::kTcp:
            return 20;
        case ipproto::kUdp:
        case ipproto::kIcmp:
        case ipproto::kIcmpV6:
            return 8;
        default:
            return 0;
    }
}

/// Smallest valid total_length for a packet of this family and protocol.
inline std::uint32_t minimum_ip_length(bool v6, std::uint8_t proto) {
    return static_cast<std::uint32_t>((v6 ? 40 : 20) + transport_header_size(proto));
}

namespace detail {

inline void put_be16(std::uint8_t* p, std::uint16_t v) {
    p[0] = static_cast<std::uint8_t>(v >> 8);
    p[1] = static_cast<std::uint8_t>(v);
}

inline std::uint16_t ipv4_checksum(const std::uint8_t* h, std::size_t n) {
    std::uint32_t sum = 0;
    for (std::size_t i = 0; i + 1 < n; i += 2) {
        sum += static_cast<std::uint32_t>((h[i] << 8) | h[i + 1]);
    }
    while (sum >> 16) {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    return static_cast<std::uint16_t>(~sum);
}

}  // namespace detail

/// Serializes an IPv4/IPv6 packet (header + transport header + zero payload).
inline std::vector<std::uint8_t> build_ip_packet(const PacketSpec& spec) {
    const bool v6 = !is_ipv4(spec.src_addr);
    const std::uint32_t min_len = minimum_ip_length(v6, spec.ip_protocol);
    if (spec.total_length < min_len || spec.total_length > 65535 + (v6 ? 40u : 0u)) {
        throw std::invalid_argument("build_ip_packet: total_length " + std::to_string(spec.total_length) +
                                    " outside [" + std::to_string(min_len) + ", 65535]");
    }
    std::vector<std::uint8_t> pkt(spec.total_length, 0);
    std::size_t l4 = 0;
    if (!v6) {
        pkt[0] = 0x45;
        detail::put_be16(pkt.data() + 2, static_cast<std::uint16_t>(spec.total_length));
        pkt[8] = 64;
        pkt[9] = spec.ip_protocol;
        std::copy_n(spec.src_addr.begin() + 12, 4, pkt.begin() + 12);
        std::copy_n(spec.dst_addr.begin() + 12, 4, pkt.begin() + 16);
        detail::put_be16(pkt.data() + 10, detail::ipv4_checksum(pkt.data(), 20));
        l4 = 20;
    } else {
        pkt[0] = 0x60;
        detail::put_be16(pkt.data() + 4, static_cast<std::uint16_t>(spec.total_length - 40));
        pkt[6] = spec.ip_protocol;
        pkt[7] = 64;
        std::copy_n(spec.src_addr.begin(), 16, pkt.begin() + 8);
        std::copy_n(spec.dst_addr.begin(), 16, pkt.begin() + 24);
        l4 = 40;
    }
    if (spec.ip_protocol == ipproto::kTcp) {
        detail::put_be16(pkt.data() + l4, spec.src_port);
        detail::put_be16(pkt.data() + l4 + 2, spec.dst_port);
        pkt[l4 + 12] = 0x50;
        pkt[l4 + 13] = spec.tcp_flags;
        detail::put_be16(pkt.data() + l4 + 14, 65535);
    } else if (spec.ip_protocol == ipproto::kUdp) {
        detail::put_be16(pkt.data() + l4, spec.src_port);
        detail::put_be16(pkt.data() + l4 + 2, spec.dst_port);
        detail::put_be16(pkt.data() + l4 + 4, static_cast<std::uint16_t>(spec.total_length - l4));
    } else if (spec.ip_protocol == ipproto::kIcmp || spec.ip_protocol == ipproto::kIcmpV6) {
        pkt[l4] = 8;
    }
    return pkt;
}

inline std::vector<std::uint8_t> wrap_ethernet(std::span<const std::uint8_t> ip_packet) {
    std::vector<std::uint8_t> frame(14 + ip_packet.size());
    const std::uint8_t dst[6] = {0x02, 0x00, 0x00, 0x00, 0x00, 0x02};
    const std::uint8_t src[6] = {0x02, 0x00, 0x00, 0x00, 0x00, 0x01};
    std::copy_n(dst, 6, frame.begin());
    std::copy_n(src, 6, frame.begin() + 6);
    const bool v6 = !ip_packet.empty() && (ip_packet[0] >> 4) == 6;
    detail::put_be16(frame.data() + 12, v6 ? 0x86dd : 0x0800);
    std::copy(ip_packet.begin(), ip_packet.end(), frame.begin() + 14);
    return frame;
}

/// Minimal ARP request frame (non-IP traffic for filter tests).
inline std::vector<std::uint8_t> build_arp_frame() {
    std::vector<std::uint8_t> frame(42, 0);
    std::fill_n(frame.begin(), 6, 0xff);
    frame[11] = 0x01;
    detail::put_be16(frame.data() + 12, 0x0806);
    detail::put_be16(frame.data() + 14, 1);
    detail::put_be16(frame.data() + 16, 0x0800);
    frame[18] = 6;
    frame[19] = 4;
    detail::put_be16(frame.data() + 20, 1);
    return frame;
}

/// Classic pcap writer into a byte buffer. Frames longer than the snap length
/// are cut, with the original length preserved in the record header.
class PcapWriter {
public:
    explicit PcapWriter(LinkType link = LinkType::kEthernet, bool big_endian = false, std::uint32_t snaplen = 65535)
        : link_(link), big_endian_(big_endian), snaplen_(snaplen) {
        put32(kPcapMagic);
        put16(2);
        put16(4);
        put32(0);
        put32(0);
        put32(snaplen_);
        put32(static_cast<std::uint32_t>(link_));
    }

    void write_frame(std::int64_t timestamp_us, std::span<const std::uint8_t> frame) {
        if (timestamp_us < 0) {
            throw std::invalid_argument("PcapWriter: negative timestamp");
        }
        const auto incl = static_cast<std::uint32_t>(std::min<std::size_t>(frame.size(), snaplen_));
        put32(static_cast<std::uint32_t>(timestamp_us / 1'000'000));
        put32(static_cast<std::uint32_t>(timestamp_us % 1'000'000));
        put32(incl);
        put32(static_cast<std::uint32_t>(frame.size()));
        bytes_.insert(bytes_.end(), frame.begin(), frame.begin() + incl);
    }

    /// Builds and writes a packet, framing it for the writer's link type.
    void write_packet(const PacketSpec& spec) {
        const auto ip = build_ip_packet(spec);
        if (link_ == LinkType::kEthernet) {
            write_frame(spec.timestamp_us, wrap_ethernet(ip));
        } else {
            write_frame(spec.timestamp_us, ip);
        }
    }

    [[nodiscard]] const std::vector<std::uint8_t>& bytes() const { return bytes_; }
    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    void put32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            const int shift = big_endian_ ? 24 - 8 * i : 8 * i;
            bytes_.push_back(static_cast<std::uint8_t>(v >> shift));
        }
    }
    void put16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) {
            const int shift = big_endian_ ? 8 - 8 * i : 8 * i;
            bytes_.push_back(static_cast<std::uint8_t>(v >> shift));
        }
    }

    LinkType link_;
    bool big_endian_;
    std::uint32_t snaplen_;
    std::vector<std::uint8_t> bytes_;
};

}  // namespace flowlens
