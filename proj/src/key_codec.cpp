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

#include "keyauth/key_codec.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "keyauth/error.hpp"

namespace keyauth {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

constexpr std::string_view kBase64Alphabet =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += kBase64Alphabet[(v >> 18) & 63];
        out += kBase64Alphabet[(v >> 12) & 63];
        out += kBase64Alphabet[(v >> 6) & 63];
        out += kBase64Alphabet[v & 63];
    }
    const std::size_t rest = bytes.size() - i;
    if (rest == 1) {
        const std::uint32_t v = bytes[i] << 16;
        out += kBase64Alphabet[(v >> 18) & 63];
        out += kBase64Alphabet[(v >> 12) & 63];
        out += "==";
    } else if (rest == 2) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out += kBase64Alphabet[(v >> 18) & 63];
        out += kBase64Alphabet[(v >> 12) & 63];
        out += kBase64Alphabet[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    std::array<int, 256> rev{};
    rev.fill(-1);
    for (std::size_t k = 0; k < kBase64Alphabet.size(); ++k)
        rev[static_cast<unsigned char>(kBase64Alphabet[k])] = static_cast<int>(k);
    std::vector<std::uint8_t> out;
    std::uint32_t acc = 0;
    int nbits = 0;
    for (char ch : text) {
        if (ch == '=') break;
        const int v = rev[static_cast<unsigned char>(ch)];
        if (v < 0) throw FormatError("invalid base64 character");
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        nbits += 6;
        if (nbits >= 8) {
            nbits -= 8;
            out.push_back(static_cast<std::uint8_t>((acc >> nbits) & 0xFF));
        }
    }
    return out;
}

}  // namespace

UserKey generate_key(std::string_view user_id, int side, int channels, std::uint64_t seed) {
    require(side >= 1, "generate_key: side must be positive");
    require(channels >= 1, "generate_key: channels must be positive");
    // Identity and seed both feed the stream; 64-bit draws give 64 bits each.
    std::seed_seq seq{static_cast<std::uint32_t>(fnv1a64(user_id)),
                      static_cast<std::uint32_t>(fnv1a64(user_id) >> 32),
                      static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
    std::mt19937_64 rng(seq);
    UserKey key{std::string(user_id), channels, side, {}};
    key.bits.resize(static_cast<std::size_t>(channels) * side * side);
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < key.bits.size(); ++i) {
        if (i % 64 == 0) word = rng();
        key.bits[i] = static_cast<std::uint8_t>((word >> (i % 64)) & 1U);
    }
    return key;
}

ExpandedKey expand_key(const UserKey& key, int height, int width) {
    require(key.side >= 1, "expand_key: empty key");
    require(height > 0 && width > 0, "expand_key: non-positive geometry");
    require(height % key.side == 0 && width % key.side == 0,
            "expand_key: height and width must be multiples of the key side");
    ExpandedKey out{key.channels, height, width, {}};
    out.bits.resize(static_cast<std::size_t>(key.channels) * height * width);
    std::size_t idx = 0;
    for (int ch = 0; ch < key.channels; ++ch)
        for (int i = 0; i < height; ++i)
            for (int j = 0; j < width; ++j) out.bits[idx++] = key.at(ch, i % key.side, j % key.side);
    return out;
}

std::vector<Plane> split_blocks(const Plane& plane, int side) {
    require(side >= 1, "split_blocks: side must be positive");
    require(plane.height % side == 0 && plane.width % side == 0,
            "split_blocks: plane dimensions must be multiples of the block side");
    const int rows = plane.height / side;
    const int cols = plane.width / side;
    std::vector<Plane> blocks;
    blocks.reserve(static_cast<std::size_t>(rows) * cols);
    for (int br = 0; br < rows; ++br)
        for (int bc = 0; bc < cols; ++bc) {
            Plane b(plane.channels, side, side);
            for (int ch = 0; ch < plane.channels; ++ch)
                for (int i = 0; i < side; ++i)
                    for (int j = 0; j < side; ++j) b.at(ch, i, j) = plane.at(ch, br * side + i, bc * side + j);
            blocks.push_back(std::move(b));
        }
    return blocks;
}

Plane assemble_blocks(std::span<const Plane> blocks, int height, int width) {
    require(!blocks.empty(), "assemble_blocks: no blocks");
    const int side = blocks.front().height;
    require(side >= 1 && height % side == 0 && width % side == 0,
            "assemble_blocks: geometry is not a multiple of the block side");
    const int cols = width / side;
    require(static_cast<std::size_t>((height / side) * cols) == blocks.size(),
            "assemble_blocks: block count does not match geometry");
    Plane out(blocks.front().channels, height, width);
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        const Plane& b = blocks[k];
        require(b.same_shape(blocks.front()), "assemble_blocks: blocks differ in shape");
        const int br = static_cast<int>(k) / cols;
        const int bc = static_cast<int>(k) % cols;
        for (int ch = 0; ch < b.channels; ++ch)
            for (int i = 0; i < side; ++i)
                for (int j = 0; j < side; ++j) out.at(ch, br * side + i, bc * side + j) = b.at(ch, i, j);
    }
    return out;
}

UserKey majority_vote(std::span<const Plane> blocks, float threshold) {
    require(!blocks.empty(), "majority_vote: empty block list");
    const Plane& first = blocks.front();
    require(first.height == first.width && first.height >= 1, "majority_vote: blocks must be square");
    std::vector<int> ones(first.values.size(), 0);
    for (const Plane& b : blocks) {
        require(b.same_shape(first), "majority_vote: blocks differ in shape");
        for (std::size_t p = 0; p < b.values.size(); ++p) ones[p] += b.values[p] >= threshold ? 1 : 0;
    }
    const int n = static_cast<int>(blocks.size());
    UserKey key{"", first.channels, first.height, std::vector<std::uint8_t>(ones.size())};
    for (std::size_t p = 0; p < ones.size(); ++p) key.bits[p] = ones[p] >= n - ones[p] ? 1 : 0;
    return key;
}

int hamming_distance(const UserKey& a, const UserKey& b) {
    require(a.channels == b.channels && a.side == b.side && a.bits.size() == b.bits.size(),
            "hamming_distance: key shapes differ");
    int d = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) d += a.bits[i] != b.bits[i];
    return d;
}

UserKey extract_key(const Plane& decoded, int side, float threshold) {
    const auto blocks = split_blocks(decoded, side);
    return majority_vote(blocks, threshold);
}

UserKey flip_random_bits(const UserKey& key, int flips, std::uint64_t seed) {
    require(flips >= 0 && static_cast<std::size_t>(flips) <= key.size(),
            "flip_random_bits: flip count exceeds key size");
    std::vector<std::size_t> pos(key.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    // Partial Fisher-Yates: first `flips` entries are a uniform sample without replacement.
    for (int k = 0; k < flips; ++k) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(k), pos.size() - 1);
        std::swap(pos[static_cast<std::size_t>(k)], pos[pick(rng)]);
    }
    UserKey out = key;
    for (int k = 0; k < flips; ++k) out.bits[pos[static_cast<std::size_t>(k)]] ^= 1U;
    return out;
}

Plane to_plane(const ExpandedKey& key) {
    Plane p(key.channels, key.height, key.width);
    for (std::size_t i = 0; i < key.bits.size(); ++i) p.values[i] = key.bits[i] ? 1.0f : 0.0f;
    return p;
}

std::string pack_bits_base64(std::span<const std::uint8_t> bits) {
    std::vector<std::uint8_t> bytes((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) bytes[i / 8] |= static_cast<std::uint8_t>(0x80U >> (i % 8));
    return base64_encode(bytes);
}

std::vector<std::uint8_t> unpack_bits_base64(std::string_view text, std::size_t count) {
    const auto bytes = base64_decode(text);
    if (bytes.size() != (count + 7) / 8) throw FormatError("packed key has the wrong length");
    std::vector<std::uint8_t> bits(count);
    for (std::size_t i = 0; i < count; ++i) bits[i] = (bytes[i / 8] >> (7 - i % 8)) & 1U;
    return bits;
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis) {
    std::uint64_t h = basis;
    for (unsigned char ch : data) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, value >>= 4) s[static_cast<std::size_t>(i)] = kHex[value & 15];
    return s;
}

std::string key_fingerprint(const UserKey& key) {
    std::string blob = std::to_string(key.channels) + "x" + std::to_string(key.side) + ":";
    blob += pack_bits_base64(key.bits);
    return hex64(fnv1a64(blob));
}

void KeyRegistry::add(RegistryEntry entry) {
    require(!entry.user_id.empty(), "registry: empty user id");
    require(entry.key.size() == static_cast<std::size_t>(entry.key.channels) * entry.key.side * entry.key.side &&
                entry.key.side >= 1,
            "registry: malformed key");
    for (const auto& e : entries_) {
        require(e.user_id != entry.user_id, "registry: duplicate user id '" + entry.user_id + "'");
        require(!e.key.same_bits(entry.key), "registry: key of '" + entry.user_id +
                                                 "' duplicates the key of '" + e.user_id + "'");
    }
    entry.key.user_id = entry.user_id;
    entries_.push_back(std::move(entry));
}

const RegistryEntry* KeyRegistry::find(std::string_view user_id) const {
    for (const auto& e : entries_)
        if (e.user_id == user_id) return &e;
    return nullptr;
}

std::string KeyRegistry::serialize() const {
    std::ostringstream os;
    for (const auto& e : entries_) {
        nlohmann::ordered_json j;
        j["user_id"] = e.user_id;
        j["r"] = e.key.side;
        j["c"] = e.key.channels;
        j["bits"] = pack_bits_base64(e.key.bits);
        j["checkpoint"] = e.checkpoint;
        if (!config_hash.empty()) j["config_hash"] = config_hash;
        os << j.dump() << '\n';
    }
    return os.str();
}

KeyRegistry KeyRegistry::parse(std::string_view text) {
    KeyRegistry reg;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            RegistryEntry e;
            e.user_id = j.at("user_id").get<std::string>();
            e.key.user_id = e.user_id;
            e.key.side = j.at("r").get<int>();
            e.key.channels = j.at("c").get<int>();
            if (e.key.side < 1 || e.key.channels < 1) throw FormatError("non-positive key geometry");
            e.key.bits = unpack_bits_base64(j.at("bits").get<std::string>(),
                                            static_cast<std::size_t>(e.key.channels) * e.key.side * e.key.side);
            e.checkpoint = j.value("checkpoint", std::string{});
            if (j.contains("config_hash")) reg.config_hash = j["config_hash"].get<std::string>();
            reg.add(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("registry line " + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return reg;
}

void KeyRegistry::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write registry " + path.string());
    os << serialize();
}

KeyRegistry KeyRegistry::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read registry " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

std::optional<TraceMatch> trace_key(const UserKey& extracted, const KeyRegistry& registry, int eps3) {
    require(!registry.empty(), "trace_key: empty registry");
    std::optional<TraceMatch> best;
    for (std::size_t i = 0; i < registry.entries().size(); ++i) {
        const auto& e = registry.entries()[i];
        const int d = hamming_distance(extracted, e.key);
        if (!best || d < best->distance) {
            best = TraceMatch{e.user_id, d, i, false};
        } else if (d == best->distance) {
            best->ambiguous = true;
        }
    }
    if (best->distance > eps3) return std::nullopt;
    return best;
}

}  // namespace keyauth
