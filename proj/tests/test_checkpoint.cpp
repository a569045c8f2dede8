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

#include <filesystem>
#include <fstream>

#include "flowlens/checkpoint.hpp"
#include "flowlens/contrastive.hpp"
#include "gradcheck_suite.hpp"

using namespace flowlens;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "flowlens_test_checkpoint";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresEveryParameter) {
    Rng rng(1);
    auto a = make_transformer_model<double>(testkit::tiny_model_config(), rng);
    Rng rng2(2);
    auto b = make_transformer_model<double>(testkit::tiny_model_config(), rng2);
    const auto path = temp_file("model.ckpt");
    Rng state(5, 17);
    save_checkpoint(path, a.named_parameters(), state, R"({"kind":"test"})");
    const auto ck = load_checkpoint(path);
    EXPECT_EQ(ck.dtype_bytes, 8);
    EXPECT_EQ(ck.rng, state);
    EXPECT_EQ(ck.metadata, R"({"kind":"test"})");
    auto dst = b.named_parameters();
    restore_parameters(ck, dst);
    const auto src = a.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
        ASSERT_EQ(src[i].name, dst[i].name);
        for (std::size_t k = 0; k < src[i].tensor.numel(); ++k) {
            ASSERT_EQ(src[i].tensor.at(k), dst[i].tensor.at(k)) << src[i].name;
        }
    }
}

TEST(Checkpoint, FloatCheckpointTagged) {
    Rng rng(1);
    auto m = make_transformer_model<float>(testkit::tiny_model_config(), rng);
    const auto path = temp_file("model_f32.ckpt");
    save_checkpoint(path, m.named_parameters(), rng);
    EXPECT_EQ(load_checkpoint(path).dtype_bytes, 4);
}

TEST(Checkpoint, ShapeMismatchAndMissingNamesRejected) {
    Rng rng(1);
    auto m = make_transformer_model<double>(testkit::tiny_model_config(), rng);
    const auto path = temp_file("small.ckpt");
    save_checkpoint(path, m.encoder_parameters(), rng);
    const auto ck = load_checkpoint(path);
    auto with_heads = m.named_parameters();
    EXPECT_THROW(restore_parameters(ck, with_heads), std::runtime_error);

    auto cfg = testkit::tiny_model_config();
    cfg.d_model = 12;
    Rng rng2(3);
    auto other = make_transformer_model<double>(cfg, rng2);
    auto enc = other.encoder_parameters();
    EXPECT_THROW(restore_parameters(ck, enc), ad::ShapeError);
}

TEST(Checkpoint, BadMagicIsFormatError) {
    const auto path = temp_file("bad.ckpt");
    std::ofstream(path) << "NOPE0000";
    EXPECT_THROW(load_checkpoint(path), binio::FormatError);
}
