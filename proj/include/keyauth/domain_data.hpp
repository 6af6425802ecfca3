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

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "keyauth/key_codec.hpp"
#include "keyauth/stegonet.hpp"

namespace keyauth {

/// Labeled images: float32 [N,C,H,W] in [0,1] plus int64 [N] labels.
struct Dataset {
    torch::Tensor images;
    torch::Tensor labels;
    int num_classes = 0;

    int64_t size() const { return images.defined() ? images.size(0) : 0; }
    Dataset subset(const torch::Tensor& index) const;
    Dataset slice(int64_t begin, int64_t end) const;
    /// First `fraction` of a seeded permutation.
    Dataset sample_fraction(double fraction, std::uint64_t seed) const;
};

/// Packed binary on disk (same container as checkpoints: arrays "images", "labels").
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

/// One sub-directory per class (sorted names = class ids), images resized to
/// height x width. Requires OpenCV support at build time.
Dataset load_image_folder(const std::filesystem::path& root, int height, int width);
bool image_folder_supported() noexcept;

/// Synthetic 10-class shape task: a shape per class on a random gradient
/// background with a distractor blob and pixel noise.
Dataset make_toy_dataset(int64_t n, std::uint64_t seed, int size = 32);

/// Dataset by name: "toy" (generated) or a path to a packed file / image folder.
Dataset load_named_dataset(const std::string& source, int64_t n, std::uint64_t seed, int size = 32);

enum class Domain : int { authorized = 0, benign = 1, noise = 2 };
std::string domain_name(Domain d);
Domain parse_domain(const std::string& name);

/// A batch drawn from the mixed set W.
struct TaggedBatch {
    torch::Tensor images;
    torch::Tensor labels;
    torch::Tensor tags;  // int64, Domain values
};

/// Benign images, the same images encoded with the owner key, and the same
/// images each encoded with its own random wrong key. Encoded views are
/// produced on first access and cached (each sample is written once).
/// Transform name -> magnitude. Known names: "crop" (padding in pixels),
/// "hflip" (probability), "rotate" (max degrees), "erase" (probability).
using AugmentPolicy = std::map<std::string, double>;

class DomainTriple {
public:
    DomainTriple(Dataset benign, UserKey owner_key, std::shared_ptr<StegoCodec> codec, std::uint64_t seed);

    int64_t size() const { return benign_.size(); }
    const Dataset& benign() const { return benign_; }
    const UserKey& owner_key() const { return key_; }

    /// Seed whose generated key is the noise key of sample i (never the owner key).
    std::uint64_t noise_seed(int64_t i) const;
    UserKey noise_key(int64_t i) const;

    torch::Tensor images(Domain d, const torch::Tensor& index);
    torch::Tensor all(Domain d);
    Dataset dataset(Domain d);

    /// Index into W = A ∪ B ∪ N: [0,n) authorized, [n,2n) benign, [2n,3n) noise.
    int64_t mixed_size() const { return 3 * size(); }
    TaggedBatch mixed(const torch::Tensor& w_index);

    /// Covers are augmented first and stego samples re-encoded from the
    /// augmented cover, so every stego image carries an intact key pattern.
    /// Samples the augmentation leaves unchanged come from the cache.
    torch::Tensor images_augmented(Domain d, const torch::Tensor& index, const AugmentPolicy& policy,
                                   torch::Generator& gen);
    TaggedBatch mixed_augmented(const torch::Tensor& w_index, const AugmentPolicy& policy, torch::Generator& gen);

    /// Number of samples currently encoded in the cache of a domain.
    int64_t cached(Domain d) const;

private:
    void fill(Domain d, const std::vector<int64_t>& missing);

    Dataset benign_;
    UserKey key_;
    std::shared_ptr<StegoCodec> codec_;
    std::vector<std::uint64_t> noise_seeds_;
    torch::Tensor cache_[2];
    std::vector<char> ready_[2];
    mutable std::mutex mu_;
};

/// Draw a key of the owner's shape from `seed`, resampling until it differs from `owner`.
std::uint64_t accepted_noise_seed(const UserKey& owner, std::uint64_t seed);

void validate_policy(const AugmentPolicy& policy);
torch::Tensor augment(const torch::Tensor& batch, const AugmentPolicy& policy, torch::Generator& gen);
torch::Tensor hflip(const torch::Tensor& batch);

}  // namespace keyauth
