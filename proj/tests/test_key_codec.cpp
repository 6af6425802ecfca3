// Copyright 2026 The keyauth Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "keyauth/error.hpp"
#include "keyauth/key_codec.hpp"

using namespace keyauth;

namespace {

Plane plane_from(int c, int h, int w, std::initializer_list<float> vals) {
    Plane p(c, h, w);
    std::copy(vals.begin(), vals.end(), p.values.begin());
    return p;
}

UserKey key_from(int c, int r, std::vector<std::uint8_t> bits) {
    return UserKey{"", c, r, std::move(bits)};
}

// Independent per-position counting, written without the library's indexing helpers.
std::vector<std::uint8_t> brute_force_vote(const std::vector<Plane>& blocks, float thr) {
    const std::size_t n = blocks.front().values.size();
    std::vector<std::uint8_t> out(n);
    for (std::size_t p = 0; p < n; ++p) {
        int ones = 0, zeros = 0;
        for (const auto& b : blocks) (b.values[p] >= thr ? ones : zeros)++;
        out[p] = ones >= zeros;
    }
    return out;
}

}  // namespace

TEST(GenerateKey, ShapeAndBinary) {
    const auto k = generate_key("alice", 16, 3, 7);
    EXPECT_EQ(k.channels, 3);
    EXPECT_EQ(k.side, 16);
    EXPECT_EQ(k.size(), 3u * 16 * 16);
    EXPECT_EQ(k.user_id, "alice");
    for (auto b : k.bits) EXPECT_TRUE(b == 0 || b == 1);
}

TEST(GenerateKey, Deterministic) {
    EXPECT_EQ(generate_key("alice", 16, 3, 7).bits, generate_key("alice", 16, 3, 7).bits);
    EXPECT_NE(generate_key("alice", 16, 3, 7).bits, generate_key("alice", 16, 3, 8).bits);
    EXPECT_NE(generate_key("alice", 16, 3, 7).bits, generate_key("bob", 16, 3, 7).bits);
}

TEST(GenerateKey, RejectsNonPositiveGeometry) {
    EXPECT_THROW(generate_key("a", 0, 1, 1), InvalidArgument);
    EXPECT_THROW(generate_key("a", 4, 0, 1), InvalidArgument);
    EXPECT_THROW(generate_key("a", -2, 1, 1), InvalidArgument);
}

TEST(GenerateKey, BitFrequencyIsBalancedAcrossSeeds) {
    long ones = 0, total = 0;
    for (std::uint64_t s = 0; s < 10000; ++s) {
        const auto k = generate_key("alice", 2, 1, s);
        for (auto b : k.bits) ones += b;
        total += static_cast<long>(k.size());
    }
    EXPECT_NEAR(static_cast<double>(ones) / total, 0.5, 0.05);
}

TEST(ExpandKey, TilesTwoByTwoFor16To32) {
    const auto k = generate_key("alice", 16, 3, 7);
    const auto e = expand_key(k, 32, 32);
    ASSERT_EQ(e.bits.size(), 3u * 32 * 32);
    for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < 32; ++i)
            for (int j = 0; j < 32; ++j) ASSERT_EQ(e.at(ch, i, j), k.at(ch, i % 16, j % 16));
}

TEST(ExpandKey, IdentityWhenSideMatches) {
    const auto k = generate_key("u", 8, 2, 1);
    EXPECT_EQ(expand_key(k, 8, 8).bits, k.bits);
}

TEST(ExpandKey, SmallPatternOracle) {
    const auto k = key_from(1, 2, {1, 0, 0, 1});
    const std::vector<std::uint8_t> expected = {1, 0, 1, 0,  //
                                                0, 1, 0, 1,  //
                                                1, 0, 1, 0,  //
                                                0, 1, 0, 1};
    EXPECT_EQ(expand_key(k, 4, 4).bits, expected);
}

TEST(ExpandKey, RejectsNonMultiple) {
    const auto k = generate_key("u", 16, 1, 1);
    EXPECT_THROW(expand_key(k, 30, 32), InvalidArgument);
    EXPECT_THROW(expand_key(k, 32, 20), InvalidArgument);
    EXPECT_NO_THROW(expand_key(generate_key("u", 32, 1, 1), 224, 224));
}

TEST(SplitBlocks, CountsAndSingleBlock) {
    Plane p(1, 4, 4);
    for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = static_cast<float>(i);
    const auto blocks = split_blocks(p, 2);
    ASSERT_EQ(blocks.size(), 4u);
    EXPECT_EQ(blocks[1].values, (std::vector<float>{2, 3, 6, 7}));
    const auto one = split_blocks(p, 4);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0].values, p.values);
    EXPECT_THROW(split_blocks(p, 3), InvalidArgument);
}

TEST(SplitBlocks, ReassembleIsExact) {
    std::mt19937 rng(3);
    std::uniform_real_distribution<float> u(-2.f, 2.f);
    Plane p(3, 12, 8);
    for (auto& v : p.values) v = u(rng);
    const auto blocks = split_blocks(p, 4);
    EXPECT_EQ(blocks.size(), 6u);
    const auto back = assemble_blocks(blocks, 12, 8);
    EXPECT_EQ(back.values, p.values);
}

TEST(MajorityVote, WorkedExample) {
    const std::vector<Plane> blocks = {plane_from(1, 2, 2, {1, 0, 0, 1}), plane_from(1, 2, 2, {1, 0, 0, 0}),
                                       plane_from(1, 2, 2, {1, 1, 0, 1}), plane_from(1, 2, 2, {0, 0, 1, 1})};
    const auto expected = brute_force_vote(blocks, 0.5f);
    EXPECT_EQ(expected, (std::vector<std::uint8_t>{1, 0, 0, 1}));
    EXPECT_EQ(majority_vote(blocks).bits, expected);
}

TEST(MajorityVote, TiesResolveToOne) {
    const std::vector<Plane> blocks = {plane_from(1, 1, 1, {0.9f}), plane_from(1, 1, 1, {0.1f})};
    EXPECT_EQ(majority_vote(blocks).bits, (std::vector<std::uint8_t>{1}));
}

TEST(MajorityVote, IdenticalAndSingleBlocks) {
    const auto b = plane_from(1, 2, 2, {1, 0, 1, 1});
    const std::vector<Plane> same(5, b);
    EXPECT_EQ(majority_vote(same).bits, (std::vector<std::uint8_t>{1, 0, 1, 1}));
    const std::vector<Plane> single = {plane_from(1, 2, 2, {0.7f, 0.2f, 0.5f, 0.49f})};
    EXPECT_EQ(majority_vote(single).bits, (std::vector<std::uint8_t>{1, 0, 1, 0}));
    EXPECT_EQ(majority_vote(single, 0.8f).bits, (std::vector<std::uint8_t>{0, 0, 0, 0}));
}

TEST(MajorityVote, EmptyOrMismatchedThrows) {
    EXPECT_THROW(majority_vote(std::vector<Plane>{}), InvalidArgument);
    const std::vector<Plane> mixed = {Plane(1, 2, 2), Plane(1, 3, 3)};
    EXPECT_THROW(majority_vote(mixed), InvalidArgument);
}

TEST(MajorityVote, PermutationInvariant) {
    std::mt19937 rng(11);
    std::uniform_real_distribution<float> u(0.f, 1.f);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Plane> blocks(6, Plane(2, 3, 3));
        for (auto& b : blocks)
            for (auto& v : b.values) v = u(rng);
        const auto ref = majority_vote(blocks);
        std::shuffle(blocks.begin(), blocks.end(), rng);
        EXPECT_EQ(majority_vote(blocks).bits, ref.bits);
    }
}

TEST(KeyPipeline, ExpandSplitVoteIsIdentity) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const int r = 1 + static_cast<int>(s % 5);
        const auto k = generate_key("p", r, 1 + static_cast<int>(s % 3), s);
        const auto ek = expand_key(k, r * 3, r * 2);
        EXPECT_EQ(extract_key(to_plane(ek), r).bits, k.bits);
    }
}

TEST(HammingDistance, Basics) {
    const auto k = generate_key("h", 4, 2, 5);
    EXPECT_EQ(hamming_distance(k, k), 0);
    UserKey comp = k;
    for (auto& b : comp.bits) b ^= 1U;
    EXPECT_EQ(hamming_distance(k, comp), 2 * 4 * 4);
    EXPECT_EQ(hamming_distance(k, comp), hamming_distance(comp, k));
    EXPECT_EQ(hamming_distance(k, flip_random_bits(k, 3, 99)), 3);
    EXPECT_THROW(hamming_distance(k, generate_key("h", 3, 2, 5)), InvalidArgument);
}

TEST(FlipBits, RejectsTooMany) {
    const auto k = generate_key("f", 2, 1, 1);
    EXPECT_THROW(flip_random_bits(k, 5, 0), InvalidArgument);
    EXPECT_EQ(hamming_distance(k, flip_random_bits(k, 4, 0)), 4);
}

namespace {
KeyRegistry make_registry(int n, int r = 4) {
    KeyRegistry reg;
    for (int i = 0; i < n; ++i) {
        const std::string id = "user" + std::to_string(i);
        reg.add({id, generate_key(id, r, 1, 100 + i), "protected/" + id + ".ckpt"});
    }
    return reg;
}
}  // namespace

TEST(TraceKey, ExactMatch) {
    const auto reg = make_registry(8);
    const auto m = trace_key(reg.entries()[5].key, reg, 1);
    ASSERT_TRUE(m.has_value());
    EXPECT_EQ(m->user_id, "user5");
    EXPECT_EQ(m->distance, 0);
    EXPECT_FALSE(m->ambiguous);
}

TEST(TraceKey, ThresholdExclusion) {
    KeyRegistry reg;
    reg.add({"a", key_from(1, 2, {0, 0, 0, 0}), ""});
    reg.add({"b", key_from(1, 2, {1, 1, 1, 1}), ""});
    // Two bits away from both keys.
    EXPECT_FALSE(trace_key(key_from(1, 2, {1, 1, 0, 0}), reg, 1).has_value());
    const auto m = trace_key(key_from(1, 2, {1, 1, 0, 0}), reg, 2);
    ASSERT_TRUE(m.has_value());
    EXPECT_TRUE(m->ambiguous);
    EXPECT_EQ(m->index, 0u);
}

TEST(TraceKey, FullThresholdAlwaysMatches) {
    const auto reg = make_registry(5);
    for (std::uint64_t s = 0; s < 20; ++s) EXPECT_TRUE(trace_key(generate_key("x", 4, 1, s), reg, 16).has_value());
    EXPECT_THROW(trace_key(generate_key("x", 4, 1, 0), KeyRegistry{}, 1), InvalidArgument);
    EXPECT_THROW(trace_key(generate_key("x", 3, 1, 0), reg, 1), InvalidArgument);
}

TEST(TraceKey, UniqueWhenWithinHalfMinimumDistance) {
    const auto reg = make_registry(6, 8);
    int min_pair = 1 << 30;
    for (std::size_t i = 0; i < reg.size(); ++i)
        for (std::size_t j = i + 1; j < reg.size(); ++j)
            min_pair = std::min(min_pair, hamming_distance(reg.entries()[i].key, reg.entries()[j].key));
    const int eps3 = (min_pair - 1) / 2;
    ASSERT_GE(eps3, 1);
    for (std::size_t i = 0; i < reg.size(); ++i) {
        const auto noisy = flip_random_bits(reg.entries()[i].key, eps3, i);
        const auto m = trace_key(noisy, reg, eps3);
        ASSERT_TRUE(m.has_value());
        EXPECT_EQ(m->index, i);
        EXPECT_FALSE(m->ambiguous);
    }
}

TEST(Registry, RejectsDuplicates) {
    KeyRegistry reg;
    reg.add({"a", generate_key("a", 4, 1, 1), ""});
    EXPECT_THROW(reg.add({"a", generate_key("a", 4, 1, 2), ""}), InvalidArgument);
    EXPECT_THROW(reg.add({"b", generate_key("a", 4, 1, 1), ""}), InvalidArgument);
}

TEST(Registry, PackingIsMsbFirst) {
    const std::vector<std::uint8_t> bits = {1, 0, 0, 0, 0, 0, 0, 0, 1};
    EXPECT_EQ(pack_bits_base64(bits), "gIA=");
    EXPECT_EQ(unpack_bits_base64("gIA=", 9), bits);
}

TEST(Registry, TextRoundTrip) {
    auto reg = make_registry(4, 16);
    reg.config_hash = "0123456789abcdef";
    const auto text = reg.serialize();
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
    const auto back = KeyRegistry::parse(text);
    ASSERT_EQ(back.size(), 4u);
    EXPECT_EQ(back.config_hash, reg.config_hash);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(back.entries()[i].user_id, reg.entries()[i].user_id);
        EXPECT_EQ(back.entries()[i].checkpoint, reg.entries()[i].checkpoint);
        EXPECT_TRUE(back.entries()[i].key.same_bits(reg.entries()[i].key));
    }
    EXPECT_THROW(KeyRegistry::parse("{\"user_id\":\"x\"}\n"), FormatError);
}
