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

#include <arpa/inet.h>

#include <array>
#include <cstdint>
#include <optional>
#include <string>

namespace flowlens {

/// IPv6-sized endpoint address; IPv4 is stored in the ::ffff:0:0/96 mapped
/// form so both families share one key type.
using Address = std::array<std::uint8_t, 16>;

inline Address ipv4_address(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d) {
    Address r{};
    r[10] = 0xff;
    r[11] = 0xff;
    r[12] = a;
    r[13] = b;
    r[14] = c;
    r[15] = d;
    return r;
}

inline Address ipv4_address(std::uint32_t host_order) {
    return ipv4_address(static_cast<std::uint8_t>(host_order >> 24), static_cast<std::uint8_t>(host_order >> 16),
                        static_cast<std::uint8_t>(host_order >> 8), static_cast<std::uint8_t>(host_order));
}

inline bool is_ipv4(const Address& a) {
    for (int i = 0; i < 10; ++i) {
        if (a[i] != 0) {
            return false;
        }
    }
    return a[10] == 0xff && a[11] == 0xff;
}

inline std::string format_address(const Address& a) {
    char buf[INET6_ADDRSTRLEN] = {};
    if (is_ipv4(a)) {
        inet_ntop(AF_INET, a.data() + 12, buf, sizeof(buf));
    } else {
        inet_ntop(AF_INET6, a.data(), buf, sizeof(buf));
    }
    return buf;
}

inline std::optional<Address> parse_address(const std::string& text) {
    Address r{};
    std::uint8_t v4[4];
    if (inet_pton(AF_INET, text.c_str(), v4) == 1) {
        return ipv4_address(v4[0], v4[1], v4[2], v4[3]);
    }
    if (inet_pton(AF_INET6, text.c_str(), r.data()) == 1) {
        return r;
    }
    return std::nullopt;
}

}  // namespace flowlens
