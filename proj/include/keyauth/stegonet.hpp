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
#include <limits>
#include <memory>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "keyauth/checkpoint.hpp"
#include "keyauth/key_codec.hpp"
#include "keyauth/training.hpp"

namespace keyauth {

/// Image and message geometry a codec is built for.
struct CodecGeometry {
    int image_channels = 3;
    int height = 32;
    int width = 32;
    int key_channels = 1;
    int key_side = 16;
    int hidden = 24;

    void validate() const;
    nlohmann::json to_json() const;
    static CodecGeometry from_json(const nlohmann::json& j);
};

/// Dense encoder: cover features, message concatenated at every layer,
/// residual added to the cover and clamped to [0, 1].
class StegoEncoderImpl : public torch::nn::Cloneable<StegoEncoderImpl> {
public:
    explicit StegoEncoderImpl(CodecGeometry g = {});
    void reset() override;
    torch::Tensor forward(const torch::Tensor& cover, const torch::Tensor& message);

private:
    CodecGeometry g_;
    torch::nn::Sequential features_{nullptr}, dense1_{nullptr}, dense2_{nullptr};
    torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(StegoEncoder);

/// Dense decoder producing per-position message logits.
class StegoDecoderImpl : public torch::nn::Cloneable<StegoDecoderImpl> {
public:
    explicit StegoDecoderImpl(CodecGeometry g = {});
    void reset() override;
    torch::Tensor forward(const torch::Tensor& stego);

private:
    CodecGeometry g_;
    torch::nn::Sequential a_{nullptr}, b_{nullptr}, c_{nullptr};
    torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(StegoDecoder);

/// Three-layer critic; one realness score per image.
class StegoCriticImpl : public torch::nn::Cloneable<StegoCriticImpl> {
public:
    explicit StegoCriticImpl(CodecGeometry g = {});
    void reset() override;
    torch::Tensor forward(const torch::Tensor& image);

private:
    CodecGeometry g_;
    torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(StegoCritic);

struct StegoCodec {
    CodecGeometry geometry;
    StegoEncoder encoder;
    StegoDecoder decoder;
    StegoCritic critic;

    explicit StegoCodec(CodecGeometry g = {}, std::uint64_t seed = 0);
    void eval();
    StegoCodec clone() const;
};

/// Stego images for a [N,3,h,w] (or [3,h,w]) batch, every image carrying `key`.
torch::Tensor encode(StegoCodec& codec, const torch::Tensor& images, const ExpandedKey& key);
/// Per-sample messages: `messages` is [N,c,h,w] of 0/1.
torch::Tensor encode_messages(StegoCodec& codec, const torch::Tensor& images, const torch::Tensor& messages);

/// Raw decoder output passed through a sigmoid: [N,c,h,w] in (0,1).
torch::Tensor decode(StegoCodec& codec, const torch::Tensor& stego);

/// decode -> split -> vote for every image in the batch.
std::vector<UserKey> extract_keys(StegoCodec& codec, const torch::Tensor& stego, float threshold = 0.5f);

/// [c,h,w] tensor <-> Plane.
Plane tensor_to_plane(const torch::Tensor& t);
torch::Tensor expanded_key_tensor(const ExpandedKey& key);
/// [N,c,h,w] message tensor of tiled random keys.
torch::Tensor random_tiled_messages(int64_t n, const CodecGeometry& g, torch::Generator& gen);

struct CodecTrainConfig {
    int epochs = 16;
    int batch = 32;
    double lr = 1e-3;
    double critic_lr = 1e-4;
    double weight_decode = 1.0;
    double weight_similarity = 30.0;
    double weight_realness = 0.1;
    double critic_clip = 0.1;
    int critic_steps = 1;
    /// Messages are random keys tiled to image size (true) or i.i.d. bit planes.
    bool tiled_messages = true;
    /// Fraction of training, at the end, over which the learning rate decays.
    double decay_fraction = 0.4;
    std::uint64_t seed = 0;
};

struct CodecEpochStats {
    double decode_loss = 0, similarity_loss = 0, realness = 0, bit_accuracy = 0;
};

/// Adversarial training of encoder/decoder against the critic. Each step
/// draws a fresh random message per image.
StegoCodec train_codec(const torch::Tensor& images, const CodecGeometry& geometry, const CodecTrainConfig& cfg,
                       const MetricsSink& sink = {});

/// Per-bit agreement between decoded and embedded messages on random keys.
double bit_accuracy(StegoCodec& codec, const torch::Tensor& images, std::uint64_t seed);

/// Decoding, similarity and realness terms on one batch (differentiable).
struct CodecLosses {
    torch::Tensor decode, similarity, realness;
};
CodecLosses codec_losses(StegoCodec& codec, const torch::Tensor& cover, const torch::Tensor& stego,
                         const torch::Tensor& messages);

struct MeanStd {
    double mean = 0;
    double std = 0;
};

struct IqaReport {
    static constexpr double kIdenticalPsnr = std::numeric_limits<double>::infinity();
    MeanStd ssim;
    MeanStd psnr;
    /// Number of identical pairs; their PSNR is +inf and they are left out of psnr mean/std.
    int identical_pairs = 0;
};

/// Per-image mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03,
/// data range 1) over channels.
torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b);
/// Per-image PSNR with peak 1.0; +inf for identical pairs.
torch::Tensor psnr_per_image(const torch::Tensor& a, const torch::Tensor& b);
IqaReport iqa(const torch::Tensor& cover, const torch::Tensor& stego);

void save_codec(const std::filesystem::path& path, const StegoCodec& codec, const nlohmann::json& extra = {});
StegoCodec load_codec(const std::filesystem::path& path);
StegoCodec codec_from_checkpoint(const Checkpoint& ck);

}  // namespace keyauth
