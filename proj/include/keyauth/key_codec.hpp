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

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace keyauth {

/// Binary c x r x r matrix assigned to one licensed user. Bits are stored
/// row-major as (channel, row, column).
struct UserKey {
    std::string user_id;
    int channels = 0;
    int side = 0;
    std::vector<std::uint8_t> bits;

    std::size_t size() const noexcept { return bits.size(); }
    std::uint8_t at(int ch, int i, int j) const {
        return bits[(static_cast<std::size_t>(ch) * side + i) * side + j];
    }
    /// Shape and bits only; the user label is not part of key identity.
    bool same_bits(const UserKey& other) const noexcept {
        return channels == other.channels && side == other.side && bits == other.bits;
    }
};

/// A key tiled to image geometry: every side x side block equals the source key.
struct ExpandedKey {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> bits;

    std::uint8_t at(int ch, int i, int j) const {
        return bits[(static_cast<std::size_t>(ch) * height + i) * width + j];
    }
};

/// Real-valued c x h x w array (decoder output, or one block of it).
struct Plane {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> values;

    Plane() = default;
    Plane(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w),
          values(static_cast<std::size_t>(c) * h * w, fill) {}

    float& at(int ch, int i, int j) {
        return values[(static_cast<std::size_t>(ch) * height + i) * width + j];
    }
    float at(int ch, int i, int j) const {
        return values[(static_cast<std::size_t>(ch) * height + i) * width + j];
    }
    bool same_shape(const Plane& o) const noexcept {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

UserKey generate_key(std::string_view user_id, int side, int channels, std::uint64_t seed);

ExpandedKey expand_key(const UserKey& key, int height, int width);

/// Non-overlapping side x side blocks in row-major block order.
std::vector<Plane> split_blocks(const Plane& plane, int side);

/// Inverse of split_blocks for a plane of the given height and width.
Plane assemble_blocks(std::span<const Plane> blocks, int height, int width);

/// Binarizes each block at `threshold` (value >= threshold -> 1), then takes
/// the per-position majority. Ties resolve to 1.
UserKey majority_vote(std::span<const Plane> blocks, float threshold = 0.5f);

int hamming_distance(const UserKey& a, const UserKey& b);

/// decode -> split -> vote, for a single decoded message plane.
UserKey extract_key(const Plane& decoded, int side, float threshold = 0.5f);

/// Copy of `key` with exactly `flips` distinct positions inverted.
UserKey flip_random_bits(const UserKey& key, int flips, std::uint64_t seed);

/// Expanded key as a real plane (0.0 / 1.0), handy for feeding the codec.
Plane to_plane(const ExpandedKey& key);

/// MSB-first packing of the row-major bits, base64 encoded.
std::string pack_bits_base64(std::span<const std::uint8_t> bits);
std::vector<std::uint8_t> unpack_bits_base64(std::string_view text, std::size_t count);

/// 64-bit FNV-1a; stable across platforms, used for fingerprints and config hashes.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);
std::string key_fingerprint(const UserKey& key);

struct RegistryEntry {
    std::string user_id;
    UserKey key;
    std::string checkpoint;
};

struct TraceMatch {
    std::string user_id;
    int distance = 0;
    std::size_t index = 0;
    bool ambiguous = false;
};

/// Owner-side record of issued keys. Value type: copying it takes a snapshot
/// that readers can use while the owner keeps registering.
class KeyRegistry {
public:
    /// Rejects duplicate user ids and keys whose bits equal an existing entry.
    void add(RegistryEntry entry);

    const std::vector<RegistryEntry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const RegistryEntry* find(std::string_view user_id) const;

    /// One JSON record per line: user_id, r, c, bits, checkpoint (+ config_hash when set).
    std::string serialize() const;
    static KeyRegistry parse(std::string_view text);
    void save(const std::filesystem::path& path) const;
    static KeyRegistry load(const std::filesystem::path& path);

    std::string config_hash;

private:
    std::vector<RegistryEntry> entries_;
};

/// Minimum-distance registry entry if that distance is <= eps3. Equal minima
/// resolve to the lowest index with `ambiguous` set.
std::optional<TraceMatch> trace_key(const UserKey& extracted, const KeyRegistry& registry, int eps3);

}  // namespace keyauth
