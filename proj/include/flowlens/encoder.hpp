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

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowlens/nn.hpp"
#include "flowlens/ops.hpp"
#include "flowlens/tokenize.hpp"

namespace flowlens {

/// Packet-sequence transformer hyperparameters. Layer count, width and head
/// count follow the published architecture; header width, feed-forward width
/// and init scale are declared defaults.
struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 256;
    std::size_t n_heads = 4;
    std::size_t d_header = 64;
    std::size_t ff_width = 1024;
    std::size_t max_len = kMaxSequenceLength;
    std::size_t proj_hidden = 256;
    std::size_t proj_dim = 128;
    std::size_t cls_hidden = 128;
    double dropout = 0.1;
    double init_std = 0.02;

    static constexpr std::size_t kHeaderChannels = 5;

    void validate() const {
        if (n_layers == 0 || d_model == 0 || n_heads == 0 || d_header == 0 || ff_width == 0 || max_len == 0 ||
            proj_hidden == 0 || proj_dim == 0 || cls_hidden == 0) {
            throw std::invalid_argument("ModelConfig: every dimension must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
        }
        if (!(dropout >= 0.0 && dropout < 1.0)) {
            throw std::invalid_argument("ModelConfig: dropout must lie in [0, 1)");
        }
    }

    [[nodiscard]] std::size_t head_dim() const { return d_model / n_heads; }

    [[nodiscard]] nlohmann::json to_json() const {
        return {{"n_layers", n_layers},     {"d_model", d_model},       {"n_heads", n_heads},
                {"d_header", d_header},     {"ff_width", ff_width},     {"max_len", max_len},
                {"proj_hidden", proj_hidden}, {"proj_dim", proj_dim},   {"cls_hidden", cls_hidden},
                {"dropout", dropout},       {"init_std", init_std}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.n_layers = j.value("n_layers", c.n_layers);
        c.d_model = j.value("d_model", c.d_model);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.d_header = j.value("d_header", c.d_header);
        c.ff_width = j.value("ff_width", c.ff_width);
        c.max_len = j.value("max_len", c.max_len);
        c.proj_hidden = j.value("proj_hidden", c.proj_hidden);
        c.proj_dim = j.value("proj_dim", c.proj_dim);
        c.cls_hidden = j.value("cls_hidden", c.cls_hidden);
        c.dropout = j.value("dropout", c.dropout);
        c.init_std = j.value("init_std", c.init_std);
        c.validate();
        return c;
    }
};

/// Maps a categorical token (value range [0, range) plus the two sentinels)
/// to a row of its channel's embedding table.
inline std::int32_t categorical_row(std::int32_t token, std::int32_t range) {
    if (token >= 0 && token < range) {
        return token;
    }
    if (token == kClsToken) {
        return range;
    }
    if (token == kPadToken) {
        return range + 1;
    }
    throw std::out_of_range("unknown categorical token " + std::to_string(token) + " for a channel of range " +
                            std::to_string(range));
}

inline constexpr std::int32_t kProtocolRange = kMaxCategoricalToken + 1;
inline constexpr std::int32_t kFlagsRange = 256;
inline constexpr std::int32_t kDirectionRange = 2;

/// Scaled dot-product attention over (B, H, W, d_k) inputs. Keys whose
/// key_mask entry (B x W) is 0 get zero weight.
template <class T>
ad::Tensor<T> attention(const ad::Tensor<T>& q, const ad::Tensor<T>& k, const ad::Tensor<T>& v,
                        std::span<const std::uint8_t> key_mask, double dropout_p = 0.0, Rng* rng = nullptr,
                        bool train = false) {
    const auto& s = q.shape();
    if (s.rank() != 4 || !(k.shape() == s) || !(v.shape() == s)) {
        throw ad::ShapeError("attention: q " + s.str() + " k " + k.shape().str() + " v " + v.shape().str());
    }
    const std::size_t b = s[0], h = s[1], w = s[2], dk = s[3];
    if (key_mask.size() != b * w) {
        throw ad::ShapeError("attention: key mask of " + std::to_string(key_mask.size()) + " for " + s.str());
    }
    auto scores = ad::batched_matmul(ad::scale(q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)))), k, true);
    std::vector<std::uint8_t> blocked(b * h * w * w);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < h * w; ++j) {
            for (std::size_t c = 0; c < w; ++c) {
                blocked[(i * h * w + j) * w + c] = key_mask[i * w + c] ? 0 : 1;
            }
        }
    }
    auto probs = ad::softmax(ad::masked_fill(scores, blocked, -std::numeric_limits<T>::infinity()));
    if (train && dropout_p > 0.0) {
        if (!rng) {
            throw std::invalid_argument("attention: dropout requires an rng");
        }
        probs = ad::dropout(probs, dropout_p, *rng, true);
    }
    return ad::batched_matmul(probs, v);
}

/// Per-header embeddings of a batch, each (B, W, d_header).
template <class T>
struct HeaderEmbeddings {
    ad::Tensor<T> protocol;
    ad::Tensor<T> length;
    ad::Tensor<T> flags;
    ad::Tensor<T> iat;
    ad::Tensor<T> direction;
};

/// Packet-token embedding followed by a pre-norm transformer encoder stack.
/// The [CLS] position of the final layer is the flow representation.
template <class T>
class TransformerEncoder {
public:
    using Item = TokenizedSequence;

    struct Block {
        nn::LayerNorm<T> ln_attn;
        nn::Linear<T> query, key, value, out;
        nn::LayerNorm<T> ln_ff;
        nn::Linear<T> ff_in, ff_out;
    };

    TransformerEncoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const double sd = cfg_.init_std;
        const std::size_t dh = cfg_.d_header, d = cfg_.d_model;
        protocol_table_ = nn::truncated_normal<T>({kProtocolRange + 2, dh}, sd, rng);
        flags_table_ = nn::truncated_normal<T>({kFlagsRange + 2, dh}, sd, rng);
        direction_table_ = nn::truncated_normal<T>({kDirectionRange + 2, dh}, sd, rng);
        length_proj_ = nn::Linear<T>(1, dh, sd, rng);
        iat_proj_ = nn::Linear<T>(1, dh, sd, rng);
        packet_proj_ = nn::Linear<T>(ModelConfig::kHeaderChannels * dh, d, sd, rng);
        positions_ = nn::truncated_normal<T>({cfg_.max_len + 1, d}, sd, rng);
        cls_ = nn::truncated_normal<T>({d}, sd, rng);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
            Block b;
            b.ln_attn = nn::LayerNorm<T>(d);
            b.query = nn::Linear<T>(d, d, sd, rng);
            b.key = nn::Linear<T>(d, d, sd, rng);
            b.value = nn::Linear<T>(d, d, sd, rng);
            b.out = nn::Linear<T>(d, d, sd, rng);
            b.ln_ff = nn::LayerNorm<T>(d);
            b.ff_in = nn::Linear<T>(d, cfg_.ff_width, sd, rng);
            b.ff_out = nn::Linear<T>(cfg_.ff_width, d, sd, rng);
            blocks_.push_back(std::move(b));
        }
        final_ln_ = nn::LayerNorm<T>(d);
    }

    [[nodiscard]] const ModelConfig& config() const { return cfg_; }
    [[nodiscard]] std::size_t embedding_dim() const { return cfg_.d_model; }

    /// Independent copy with its own parameter storage.
    [[nodiscard]] TransformerEncoder clone() const {
        Rng scratch(0);
        TransformerEncoder c(cfg_, scratch);
        auto dst = c.named_parameters();
        nn::copy_values(named_parameters(), dst);
        return c;
    }

    [[nodiscard]] HeaderEmbeddings<T> header_embeddings(const TokenBatch& batch) const {
        check_batch(batch);
        const ad::Shape idx{batch.batch, batch.width};
        auto rows = [&](const std::vector<std::int32_t>& ids, std::int32_t range) {
            std::vector<std::int32_t> r(ids.size());
            for (std::size_t i = 0; i < ids.size(); ++i) {
                r[i] = categorical_row(ids[i], range);
            }
            return r;
        };
        auto numeric = [&](const std::vector<double>& xs) {
            std::vector<T> v(xs.begin(), xs.end());
            return ad::Tensor<T>::from({batch.batch, batch.width, 1}, std::move(v));
        };
        HeaderEmbeddings<T> e;
        const auto proto_rows = rows(batch.protocol, kProtocolRange);
        const auto flag_rows = rows(batch.flags, kFlagsRange);
        const auto dir_rows = rows(batch.direction, kDirectionRange);
        e.protocol = ad::embedding_lookup(protocol_table_, proto_rows, idx);
        e.length = length_proj_(numeric(batch.length));
        e.flags = ad::embedding_lookup(flags_table_, flag_rows, idx);
        e.iat = iat_proj_(numeric(batch.iat));
        e.direction = ad::embedding_lookup(direction_table_, dir_rows, idx);
        return e;
    }

    /// (B, W, d): packet tokens plus positions; [CLS] embedding at column 0.
    [[nodiscard]] ad::Tensor<T> embed_packets(const TokenBatch& batch) const {
        auto e = header_embeddings(batch);
        auto packed = ad::concat<T>({e.protocol, e.length, e.flags, e.iat, e.direction}, 2);
        auto tokens = packet_proj_(packed);
        tokens = ad::assign_position(tokens, cls_, 0);
        return ad::add_broadcast(tokens, ad::slice(positions_, 0, 0, batch.width));
    }

    /// [CLS] representations (B, d_model). Dropout is active only when
    /// `train` is set.
    [[nodiscard]] ad::Tensor<T> encode(const TokenBatch& batch, bool train, Rng& rng) const {
        const std::size_t b = batch.batch, w = batch.width, d = cfg_.d_model, h = cfg_.n_heads;
        std::vector<std::uint8_t> pad_rows(batch.mask.size());
        for (std::size_t i = 0; i < pad_rows.size(); ++i) {
            pad_rows[i] = batch.mask[i] ? 0 : 1;
        }
        auto x = ad::dropout(embed_packets(batch), cfg_.dropout, rng, train);
        x = ad::masked_fill(x, pad_rows, T(0));
        auto heads = [&](const ad::Tensor<T>& t) { return ad::transpose(ad::reshape(t, {b, w, h, d / h}), 1, 2); };
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const Block& blk = blocks_[l];
            auto hn = blk.ln_attn(x);
            auto ctx = attention(heads(blk.query(hn)), heads(blk.key(hn)), heads(blk.value(hn)), batch.mask,
                                 cfg_.dropout, &rng, train);
            auto merged = ad::reshape(ad::transpose(ctx, 1, 2), {b, w, d});
            x = ad::add(x, ad::dropout(blk.out(merged), cfg_.dropout, rng, train));
            auto ff = blk.ff_out(ad::gelu(blk.ff_in(blk.ln_ff(x))));
            x = ad::add(x, ad::dropout(ff, cfg_.dropout, rng, train));
            x = ad::masked_fill(x, pad_rows, T(0));
            ad::require_finite(x, "encoder layer " + std::to_string(l));
        }
        x = final_ln_(x);
        return ad::reshape(ad::slice(x, 1, 0, 1), {b, d});
    }

    /// encode() over length-sorted chunks of at most `chunk` sequences, rows
    /// returned in input order. Equal to one padded batch by padding
    /// invariance, at a fraction of the padded work.
    [[nodiscard]] ad::Tensor<T> encode_items(std::span<const TokenizedSequence* const> items, bool train, Rng& rng,
                                             std::size_t chunk = 32) const {
        if (items.size() <= chunk) {
            return encode(pad_batch(items), train, rng);
        }
        std::vector<std::size_t> order(items.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return items[a]->size() < items[b]->size(); });
        std::vector<ad::Tensor<T>> parts;
        std::vector<const TokenizedSequence*> ptrs;
        for (std::size_t c0 = 0; c0 < order.size(); c0 += chunk) {
            ptrs.clear();
            for (std::size_t r = c0; r < std::min(order.size(), c0 + chunk); ++r) {
                ptrs.push_back(items[order[r]]);
            }
            parts.push_back(encode(pad_batch(ptrs), train, rng));
        }
        std::vector<std::size_t> position(order.size());
        for (std::size_t k = 0; k < order.size(); ++k) {
            position[order[k]] = k;
        }
        return ad::gather_rows(ad::concat(parts, 0), position);
    }

    [[nodiscard]] std::vector<NamedTensor<T>> named_parameters() const {
        std::vector<NamedTensor<T>> out;
        out.push_back({"embed.protocol", protocol_table_});
        out.push_back({"embed.flags", flags_table_});
        out.push_back({"embed.direction", direction_table_});
        length_proj_.collect("embed.length", out);
        iat_proj_.collect("embed.iat", out);
        packet_proj_.collect("embed.packet", out);
        out.push_back({"embed.position", positions_});
        out.push_back({"embed.cls", cls_});
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const std::string p = "layer" + std::to_string(l);
            const Block& b = blocks_[l];
            b.ln_attn.collect(p + ".ln_attn", out);
            b.query.collect(p + ".query", out);
            b.key.collect(p + ".key", out);
            b.value.collect(p + ".value", out);
            b.out.collect(p + ".attn_out", out);
            b.ln_ff.collect(p + ".ln_ff", out);
            b.ff_in.collect(p + ".ff_in", out);
            b.ff_out.collect(p + ".ff_out", out);
        }
        final_ln_.collect("final_ln", out);
        return out;
    }

    [[nodiscard]] const ad::Tensor<T>& positions() const { return positions_; }
    [[nodiscard]] const ad::Tensor<T>& cls_embedding() const { return cls_; }
    [[nodiscard]] const nn::Linear<T>& length_projection() const { return length_proj_; }
    [[nodiscard]] const nn::Linear<T>& iat_projection() const { return iat_proj_; }

private:
    void check_batch(const TokenBatch& batch) const {
        if (batch.width == 0 || batch.width > cfg_.max_len + 1) {
            throw std::invalid_argument("encoder: batch width " + std::to_string(batch.width) + " exceeds " +
                                        std::to_string(cfg_.max_len + 1));
        }
        const std::size_t n = batch.batch * batch.width;
        if (batch.protocol.size() != n || batch.flags.size() != n || batch.direction.size() != n ||
            batch.length.size() != n || batch.iat.size() != n || batch.mask.size() != n) {
            throw std::invalid_argument("encoder: inconsistent token batch arrays");
        }
    }

    ModelConfig cfg_;
    ad::Tensor<T> protocol_table_, flags_table_, direction_table_;
    nn::Linear<T> length_proj_, iat_proj_, packet_proj_;
    ad::Tensor<T> positions_, cls_;
    std::vector<Block> blocks_;
    nn::LayerNorm<T> final_ln_;
};

}  // namespace flowlens
