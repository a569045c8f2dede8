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
#include <map>
#include <string>
#include <vector>

#include "flowlens/binio.hpp"
#include "flowlens/rng.hpp"
#include "flowlens/tensor.hpp"

// Checkpoint layout (little-endian):
//   "FLCK" u32 version u8 dtype_bytes(4|8) u64 rng_key u64 rng_counter
//   string metadata_json u32 count
//   count x { string name, u8 rank, u64 dims[rank], dtype data[numel] }

namespace flowlens {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct NamedTensor {
    std::string name;
    ad::Tensor<T> tensor;
};

struct CheckpointEntry {
    ad::Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    int dtype_bytes = 8;
    Rng rng;
    std::string metadata;
    std::map<std::string, CheckpointEntry> entries;
};

template <class T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& params, const Rng& rng,
                     const std::string& metadata = "{}") {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    }
    binio::put_magic(os, "FLCK");
    binio::put<std::uint32_t>(os, kCheckpointVersion);
    binio::put<std::uint8_t>(os, static_cast<std::uint8_t>(sizeof(T)));
    binio::put<std::uint64_t>(os, rng.key());
    binio::put<std::uint64_t>(os, rng.counter());
    binio::put_string(os, metadata);
    binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        binio::put_string(os, p.name);
        const auto& s = p.tensor.shape();
        binio::put<std::uint8_t>(os, static_cast<std::uint8_t>(s.rank()));
        for (std::size_t d : s.dims()) {
            binio::put<std::uint64_t>(os, d);
        }
        for (T v : p.tensor.values()) {
            binio::put<T>(os, v);
        }
    }
    if (!os) {
        throw std::runtime_error("failed writing checkpoint: " + path.string());
    }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open checkpoint: " + path.string());
    }
    binio::expect_magic(is, "FLCK", "checkpoint");
    const auto version = binio::get<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
        throw binio::FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    ck.dtype_bytes = binio::get<std::uint8_t>(is);
    if (ck.dtype_bytes != 4 && ck.dtype_bytes != 8) {
        throw binio::FormatError("unknown checkpoint dtype tag");
    }
    const auto key = binio::get<std::uint64_t>(is);
    const auto counter = binio::get<std::uint64_t>(is);
    ck.rng = Rng::from_state(key, counter);
    ck.metadata = binio::get_string(is);
    const auto count = binio::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = binio::get_string(is);
        const auto rank = binio::get<std::uint8_t>(is);
        if (rank > ad::Shape::kMaxRank) {
            throw binio::FormatError("tensor rank too large in checkpoint");
        }
        std::vector<std::size_t> dims(rank);
        for (auto& d : dims) {
            d = binio::get<std::uint64_t>(is);
        }
        CheckpointEntry e;
        e.shape = ad::Shape::from_range(dims.begin(), dims.end());
        e.values.resize(e.shape.numel());
        for (auto& v : e.values) {
            v = ck.dtype_bytes == 8 ? binio::get<double>(is) : static_cast<double>(binio::get<float>(is));
        }
        ck.entries.emplace(std::move(name), std::move(e));
    }
    return ck;
}

/// Copies checkpoint values into same-named parameters; every parameter must
/// be present with an identical shape.
template <class T>
void restore_parameters(const Checkpoint& ck, std::vector<NamedTensor<T>>& params) {
    for (auto& p : params) {
        auto it = ck.entries.find(p.name);
        if (it == ck.entries.end()) {
            throw std::runtime_error("checkpoint is missing parameter '" + p.name + "'");
        }
        if (!(it->second.shape == p.tensor.shape())) {
            throw ad::ShapeError("checkpoint parameter '" + p.name + "' has shape " + it->second.shape.str() +
                                 ", model expects " + p.tensor.shape().str());
        }
        auto dst = p.tensor.mutable_values();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] = static_cast<T>(it->second.values[i]);
        }
    }
}

}  // namespace flowlens
