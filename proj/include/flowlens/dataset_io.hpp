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
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowlens/binio.hpp"
#include "flowlens/flow.hpp"
#include "flowlens/netflow.hpp"

// Dataset containers (little-endian). See docs/dataset_format.md.
//
//   packet sequences  "FLSQ" u32 version u64 count, then per flow:
//       u64 id, i64 start_us, u8 label (0 benign, 1 malicious, 255 none),
//       string attack, u32 dropped, u8 L, L x (u8 protocol, u32 length,
//       u8 flags, f64 iat, u8 direction)
//   netflow records   "FLNF" u32 version u32 features u64 count, then per row:
//       u64 id, u8 label, string attack, features x f64

namespace flowlens {

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace io_detail {

inline std::uint8_t label_code(const std::optional<Label>& l) {
    if (!l) {
        return 255;
    }
    return *l == Label::kMalicious ? 1 : 0;
}

inline std::optional<Label> label_from_code(std::uint8_t c) {
    switch (c) {
        case 0:
            return Label::kBenign;
        case 1:
            return Label::kMalicious;
        case 255:
            return std::nullopt;
        default:
            throw binio::FormatError("invalid label code " + std::to_string(c));
    }
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw std::runtime_error("cannot open " + p.string() + " for writing");
    }
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open " + p.string());
    }
    return is;
}

}  // namespace io_detail

inline void write_sequences(std::ostream& os, const std::vector<FlowSequence>& flows) {
    using namespace binio;
    put_magic(os, "FLSQ");
    put<std::uint32_t>(os, kDatasetVersion);
    put<std::uint64_t>(os, flows.size());
    for (const auto& f : flows) {
        put<std::uint64_t>(os, f.id);
        put<std::int64_t>(os, f.start_us);
        put<std::uint8_t>(os, io_detail::label_code(f.label));
        put_string(os, f.attack);
        put<std::uint32_t>(os, f.dropped);
        put<std::uint8_t>(os, static_cast<std::uint8_t>(f.packets.size()));
        for (const auto& p : f.packets) {
            put<std::uint8_t>(os, p.protocol);
            put<std::uint32_t>(os, p.length);
            put<std::uint8_t>(os, p.tcp_flags);
            put<double>(os, p.iat);
            put<std::uint8_t>(os, static_cast<std::uint8_t>(p.direction));
        }
    }
}

inline std::vector<FlowSequence> read_sequences(std::istream& is) {
    using namespace binio;
    expect_magic(is, "FLSQ", "packet-sequence dataset");
    if (const auto v = get<std::uint32_t>(is); v != kDatasetVersion) {
        throw FormatError("unsupported packet-sequence dataset version " + std::to_string(v));
    }
    const auto n = get<std::uint64_t>(is);
    std::vector<FlowSequence> flows;
    for (std::uint64_t i = 0; i < n; ++i) {
        FlowSequence f;
        f.id = get<std::uint64_t>(is);
        f.start_us = get<std::int64_t>(is);
        f.label = io_detail::label_from_code(get<std::uint8_t>(is));
        f.attack = get_string(is, 4096);
        f.dropped = get<std::uint32_t>(is);
        const auto len = get<std::uint8_t>(is);
        if (len == 0 || len > 32) {
            throw FormatError("flow " + std::to_string(f.id) + " has invalid length " + std::to_string(len));
        }
        f.packets.resize(len);
        for (auto& p : f.packets) {
            p.protocol = get<std::uint8_t>(is);
            p.length = get<std::uint32_t>(is);
            p.tcp_flags = get<std::uint8_t>(is);
            p.iat = get<double>(is);
            const auto d = get<std::uint8_t>(is);
            if (d > 1) {
                throw FormatError("invalid direction code " + std::to_string(d));
            }
            p.direction = static_cast<Direction>(d);
        }
        flows.push_back(std::move(f));
    }
    return flows;
}

inline void write_netflow(std::ostream& os, const std::vector<NetFlowRecord>& rows) {
    using namespace binio;
    put_magic(os, "FLNF");
    put<std::uint32_t>(os, kDatasetVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(kNetFlowFeatures));
    put<std::uint64_t>(os, rows.size());
    for (const auto& r : rows) {
        put<std::uint64_t>(os, r.id);
        put<std::uint8_t>(os, io_detail::label_code(r.label));
        put_string(os, r.attack);
        for (double v : r.features) {
            put<double>(os, v);
        }
    }
}

inline std::vector<NetFlowRecord> read_netflow(std::istream& is) {
    using namespace binio;
    expect_magic(is, "FLNF", "netflow dataset");
    if (const auto v = get<std::uint32_t>(is); v != kDatasetVersion) {
        throw FormatError("unsupported netflow dataset version " + std::to_string(v));
    }
    if (const auto k = get<std::uint32_t>(is); k != kNetFlowFeatures) {
        throw FormatError("netflow dataset has " + std::to_string(k) + " features, expected 43");
    }
    const auto n = get<std::uint64_t>(is);
    std::vector<NetFlowRecord> rows;
    for (std::uint64_t i = 0; i < n; ++i) {
        NetFlowRecord r;
        r.id = get<std::uint64_t>(is);
        r.label = io_detail::label_from_code(get<std::uint8_t>(is));
        r.attack = get_string(is, 4096);
        for (auto& v : r.features) {
            v = get<double>(is);
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void save_sequences(const std::filesystem::path& p, const std::vector<FlowSequence>& flows) {
    auto os = io_detail::open_out(p);
    write_sequences(os, flows);
}

inline std::vector<FlowSequence> load_sequences(const std::filesystem::path& p) {
    auto is = io_detail::open_in(p);
    return read_sequences(is);
}

inline void save_netflow(const std::filesystem::path& p, const std::vector<NetFlowRecord>& rows) {
    auto os = io_detail::open_out(p);
    write_netflow(os, rows);
}

inline std::vector<NetFlowRecord> load_netflow(const std::filesystem::path& p) {
    auto is = io_detail::open_in(p);
    return read_netflow(is);
}

inline nlohmann::json sequence_to_json(const FlowSequence& f) {
    nlohmann::json pk = nlohmann::json::array();
    for (const auto& p : f.packets) {
        pk.push_back({{"protocol", p.protocol},
                      {"length", p.length},
                      {"flags", p.tcp_flags},
                      {"iat", p.iat},
                      {"direction", static_cast<int>(p.direction)}});
    }
    return {{"id", f.id},
            {"start_us", f.start_us},
            {"label", f.label ? nlohmann::json(label_name(*f.label)) : nlohmann::json(nullptr)},
            {"attack", f.attack},
            {"dropped", f.dropped},
            {"packets", std::move(pk)}};
}

inline void write_sequences_jsonl(std::ostream& os, const std::vector<FlowSequence>& flows) {
    for (const auto& f : flows) {
        os << sequence_to_json(f).dump() << '\n';
    }
}

inline void write_netflow_csv(std::ostream& os, const std::vector<NetFlowRecord>& rows) {
    os << "id,label,attack";
    for (auto c : kNetFlowColumns) {
        os << ',' << c;
    }
    os << '\n';
    os << std::setprecision(17);
    for (const auto& r : rows) {
        os << r.id << ',' << (r.label ? label_name(*r.label) : "") << ',' << r.attack;
        for (double v : r.features) {
            os << ',' << v;
        }
        os << '\n';
    }
}

/// 0 benign, 1 malicious; throws on unlabeled flows.
template <class Rec>
std::vector<std::int32_t> binary_labels(const std::vector<Rec>& recs) {
    std::vector<std::int32_t> y;
    y.reserve(recs.size());
    for (const auto& r : recs) {
        if (!r.label) {
            throw std::invalid_argument("record " + std::to_string(r.id) + " has no label");
        }
        y.push_back(*r.label == Label::kMalicious ? 1 : 0);
    }
    return y;
}

}  // namespace flowlens
