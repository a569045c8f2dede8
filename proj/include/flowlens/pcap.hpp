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

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowlens/address.hpp"

namespace flowlens {

class PcapFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace ipproto {
inline constexpr std::uint8_t kIcmp = 1;
inline constexpr std::uint8_t kTcp = 6;
inline constexpr std::uint8_t kUdp = 17;
inline constexpr std::uint8_t kIcmpV6 = 58;
}  // namespace ipproto

namespace tcpflag {
inline constexpr std::uint8_t kFin = 0x01;
inline constexpr std::uint8_t kSyn = 0x02;
inline constexpr std::uint8_t kRst = 0x04;
inline constexpr std::uint8_t kPsh = 0x08;
inline constexpr std::uint8_t kAck = 0x10;
inline constexpr std::uint8_t kUrg = 0x20;
inline constexpr std::uint8_t kEce = 0x40;
inline constexpr std::uint8_t kCwr = 0x80;
}  // namespace tcpflag

enum class LinkType : std::uint32_t {
    kEthernet = 1,
    kRaw = 101,
};

inline constexpr std::uint32_t kPcapMagic = 0xa1b2c3d4;
inline constexpr std::uint32_t kPcapMagicSwapped = 0xd4c3b2a1;

/// Header fields of one IP packet. Addresses and ports exist only until flow
/// assembly de-identifies the packet.
struct PacketFields {
    std::int64_t timestamp_us = 0;
    std::uint8_t ip_protocol = 0;
    std::uint32_t total_length = 0;
    std::uint8_t tcp_flags = 0;
    Address src_addr{};
    Address dst_addr{};
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    /// Non-initial IP fragment: ports are unavailable and reported as 0.
    bool later_fragment = false;

    [[nodiscard]] double timestamp() const { return static_cast<double>(timestamp_us) * 1e-6; }

    friend bool operator==(const PacketFields&, const PacketFields&) = default;
};

struct CaptureStats {
    std::size_t records = 0;
    std::size_t ip_packets = 0;
    std::size_t skipped_non_ip = 0;
    std::size_t skipped_short = 0;
    std::size_t degraded_tcp = 0;
    bool truncated = false;
    std::vector<std::string> warnings;

    [[nodiscard]] std::size_t skipped() const { return skipped_non_ip + skipped_short; }
};

struct PcapHeader {
    bool swapped = false;
    std::uint16_t version_major = 2;
    std::uint16_t version_minor = 4;
    std::uint32_t snaplen = 65535;
    LinkType link = LinkType::kEthernet;
};

namespace detail {

inline std::uint16_t be16(const std::uint8_t* p) { return static_cast<std::uint16_t>((p[0] << 8) | p[1]); }

inline std::uint32_t le32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint32_t rd32(const std::uint8_t* p, bool swapped) {
    const std::uint32_t v = le32(p);
    return swapped ? __builtin_bswap32(v) : v;
}

inline std::uint16_t rd16(const std::uint8_t* p, bool swapped) {
    const auto v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    return swapped ? static_cast<std::uint16_t>((v >> 8) | (v << 8)) : v;
}

enum class IpDecode { kOk, kNotIp, kTooShort };

struct IpDecodeResult {
    IpDecode status = IpDecode::kNotIp;
    bool degraded_tcp = false;
};

inline void read_ports_and_flags(std::span<const std::uint8_t> l4, PacketFields& out, IpDecodeResult& res) {
    if (out.later_fragment) {
        return;
    }
    if (out.ip_protocol != ipproto::kTcp && out.ip_protocol != ipproto::kUdp) {
        return;
    }
    if (l4.size() >= 4) {
        out.src_port = be16(l4.data());
        out.dst_port = be16(l4.data() + 2);
    }
    if (out.ip_protocol == ipproto::kTcp) {
        if (l4.size() >= 20) {
            out.tcp_flags = l4[13];
        } else {
            out.tcp_flags = 0;
            res.degraded_tcp = true;
        }
    }
}

/// Decodes an IPv4 or IPv6 header chain starting at `ip`.
inline IpDecodeResult decode_ip(std::span<const std::uint8_t> ip, PacketFields& out) {
    IpDecodeResult res;
    if (ip.empty()) {
        res.status = IpDecode::kTooShort;
        return res;
    }
    const int version = ip[0] >> 4;
    if (version == 4) {
        if (ip.size() < 20) {
            res.status = IpDecode::kTooShort;
            return res;
        }
        const std::size_t ihl = static_cast<std::size_t>(ip[0] & 0x0f) * 4;
        if (ihl < 20 || ip.size() < ihl) {
            res.status = IpDecode::kTooShort;
            return res;
        }
        out.total_length = be16(ip.data() + 2);
        out.ip_protocol = ip[9];
        out.later_fragment = (be16(ip.data() + 6) & 0x1fff) != 0;
        std::copy_n(ip.data() + 12, 4, out.src_addr.begin() + 12);
        std::copy_n(ip.data() + 16, 4, out.dst_addr.begin() + 12);
        out.src_addr[10] = out.src_addr[11] = out.dst_addr[10] = out.dst_addr[11] = 0xff;
        read_ports_and_flags(ip.subspan(ihl), out, res);
        res.status = IpDecode::kOk;
        return res;
    }
    if (version == 6) {
        if (ip.size() < 40) {
            res.status = IpDecode::kTooShort;
            return res;
        }
        out.total_length = 40u + be16(ip.data() + 4);
        std::copy_n(ip.data() + 8, 16, out.src_addr.begin());
        std::copy_n(ip.data() + 24, 16, out.dst_addr.begin());
        std::uint8_t next = ip[6];
        std::size_t off = 40;
        bool chain_complete = true;
        for (;;) {
            if (next == 0 || next == 43 || next == 60 || next == 51 || next == 44) {
                if (ip.size() < off + 8) {
                    chain_complete = false;
                    break;
                }
                const std::uint8_t* h = ip.data() + off;
                std::size_t len = 0;
                if (next == 44) {
                    len = 8;
                    if ((be16(h + 2) >> 3) != 0) {
                        out.later_fragment = true;
                    }
                } else if (next == 51) {
                    len = (static_cast<std::size_t>(h[1]) + 2) * 4;
                } else {
                    len = (static_cast<std::size_t>(h[1]) + 1) * 8;
                }
                next = h[0];
                off += len;
                continue;
            }
            break;
        }
        out.ip_protocol = next;
        if (chain_complete && off <= ip.size()) {
            read_ports_and_flags(ip.subspan(off), out, res);
        } else if (next == ipproto::kTcp) {
            res.degraded_tcp = true;
        }
        res.status = IpDecode::kOk;
        return res;
    }
    res.status = IpDecode::kNotIp;
    return res;
}

}  // namespace detail

struct TcpFlagsResult {
    std::uint8_t flags = 0;
    bool degraded = false;
};

/// Flags octet (CWR..FIN) of the TCP header inside an IP packet; 0 for any
/// other protocol, and 0 + degraded when the TCP header is cut short.
inline TcpFlagsResult extract_tcp_flags(std::span<const std::uint8_t> ip_packet) {
    PacketFields f;
    const auto res = detail::decode_ip(ip_packet, f);
    if (res.status != detail::IpDecode::kOk || f.ip_protocol != ipproto::kTcp) {
        return {};
    }
    return {f.tcp_flags, res.degraded_tcp};
}

/// Streaming reader over an in-memory classic pcap image.
class PcapReader {
public:
    explicit PcapReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
        if (bytes_.size() < 24) {
            throw PcapFormatError("pcap: file shorter than the 24-byte global header");
        }
        const std::uint32_t magic = detail::le32(bytes_.data());
        if (magic == kPcapMagic) {
            header_.swapped = false;
        } else if (magic == kPcapMagicSwapped) {
            header_.swapped = true;
        } else {
            throw PcapFormatError("pcap: unrecognized magic number (pcapng and nanosecond pcap are unsupported)");
        }
        header_.version_major = detail::rd16(bytes_.data() + 4, header_.swapped);
        header_.version_minor = detail::rd16(bytes_.data() + 6, header_.swapped);
        header_.snaplen = detail::rd32(bytes_.data() + 16, header_.swapped);
        const std::uint32_t link = detail::rd32(bytes_.data() + 20, header_.swapped) & 0x0fffffff;
        if (link == 1) {
            header_.link = LinkType::kEthernet;
        } else if (link == 101 || link == 12 || link == 14) {
            header_.link = LinkType::kRaw;
        } else {
            throw PcapFormatError("pcap: unsupported link type " + std::to_string(link));
        }
        if (header_.version_major != 2) {
            throw PcapFormatError("pcap: unsupported version " + std::to_string(header_.version_major));
        }
        offset_ = 24;
    }

    [[nodiscard]] const PcapHeader& header() const { return header_; }
    [[nodiscard]] const CaptureStats& stats() const { return stats_; }

    /// Next IP packet, or nullopt at end of capture.
    std::optional<PacketFields> next() {
        while (offset_ < bytes_.size()) {
            if (bytes_.size() - offset_ < 16) {
                truncate("pcap: truncated record header at end of file");
                return std::nullopt;
            }
            const std::uint8_t* rh = bytes_.data() + offset_;
            const std::uint32_t ts_sec = detail::rd32(rh, header_.swapped);
            const std::uint32_t ts_usec = detail::rd32(rh + 4, header_.swapped);
            const std::uint32_t incl = detail::rd32(rh + 8, header_.swapped);
            if (incl > header_.snaplen && incl > 262144) {
                truncate("pcap: record length " + std::to_string(incl) + " exceeds snap length; stopping");
                return std::nullopt;
            }
            if (bytes_.size() - offset_ - 16 < incl) {
                truncate("pcap: truncated packet data at end of file");
                return std::nullopt;
            }
            const auto frame = bytes_.subspan(offset_ + 16, incl);
            offset_ += 16 + incl;
            ++stats_.records;

            std::span<const std::uint8_t> ip;
            if (header_.link == LinkType::kEthernet) {
                if (frame.size() < 14) {
                    ++stats_.skipped_short;
                    continue;
                }
                std::size_t off = 12;
                std::uint16_t ethertype = detail::be16(frame.data() + off);
                while ((ethertype == 0x8100 || ethertype == 0x88a8 || ethertype == 0x9100) &&
                       frame.size() >= off + 6) {
                    off += 4;
                    ethertype = detail::be16(frame.data() + off);
                }
                if (ethertype != 0x0800 && ethertype != 0x86dd) {
                    ++stats_.skipped_non_ip;
                    continue;
                }
                ip = frame.subspan(off + 2);
            } else {
                ip = frame;
            }

            PacketFields f;
            f.timestamp_us = static_cast<std::int64_t>(ts_sec) * 1'000'000 + ts_usec;
            const auto res = detail::decode_ip(ip, f);
            if (res.status == detail::IpDecode::kNotIp) {
                ++stats_.skipped_non_ip;
                continue;
            }
            if (res.status == detail::IpDecode::kTooShort) {
                ++stats_.skipped_short;
                continue;
            }
            if (res.degraded_tcp) {
                ++stats_.degraded_tcp;
            }
            ++stats_.ip_packets;
            return f;
        }
        return std::nullopt;
    }

private:
    void truncate(std::string msg) {
        stats_.truncated = true;
        stats_.warnings.push_back(std::move(msg));
        offset_ = bytes_.size();
    }

    std::span<const std::uint8_t> bytes_;
    PcapHeader header_;
    CaptureStats stats_;
    std::size_t offset_ = 0;
};

struct ParsedCapture {
    PcapHeader header;
    std::vector<PacketFields> packets;
    CaptureStats stats;
};

inline ParsedCapture parse_pcap(std::span<const std::uint8_t> bytes) {
    PcapReader reader(bytes);
    ParsedCapture out;
    out.header = reader.header();
    while (auto p = reader.next()) {
        out.packets.push_back(*p);
    }
    out.stats = reader.stats();
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline ParsedCapture parse_pcap_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse_pcap(bytes);
}

}  // namespace flowlens
