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

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

// Little-endian primitive I/O shared by the dataset and checkpoint formats.

namespace flowlens::binio {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <class U>
U byteswap_uint(U v) {
    U r = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        r = static_cast<U>((r << 8) | ((v >> (8 * i)) & 0xff));
    }
    return r;
}

template <class T>
void put(std::ostream& os, T v) {
    static_assert(std::is_arithmetic_v<T>);
    if constexpr (sizeof(T) == 1) {
        os.put(static_cast<char>(v));
    } else {
        using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                     std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
        U u;
        std::memcpy(&u, &v, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            u = byteswap_uint(u);
        }
        char buf[sizeof(T)];
        std::memcpy(buf, &u, sizeof(T));
        os.write(buf, sizeof(T));
    }
}

template <class T>
T get(std::istream& is) {
    static_assert(std::is_arithmetic_v<T>);
    char buf[sizeof(T)];
    if (!is.read(buf, sizeof(T))) {
        throw FormatError("unexpected end of file");
    }
    if constexpr (sizeof(T) == 1) {
        T v;
        std::memcpy(&v, buf, 1);
        return v;
    } else {
        using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                     std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
        U u;
        std::memcpy(&u, buf, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            u = byteswap_uint(u);
        }
        T v;
        std::memcpy(&v, &u, sizeof(T));
        return v;
    }
}

inline void put_string(std::ostream& os, const std::string& s) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t max_len = 1u << 24) {
    const auto n = get<std::uint32_t>(is);
    if (n > max_len) {
        throw FormatError("string length " + std::to_string(n) + " exceeds limit");
    }
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) {
        throw FormatError("unexpected end of file in string");
    }
    return s;
}

inline void put_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5], const std::string& what) {
    char buf[4];
    if (!is.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
        throw FormatError("not a " + what + " file (bad magic)");
    }
}

}  // namespace flowlens::binio
