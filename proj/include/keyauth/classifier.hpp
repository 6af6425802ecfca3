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

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace keyauth {

/// Four conv stages (conv-bn-relu x2 each, 2x2 max-pool between stages),
/// global average pool, linear head.
struct ClassifierSpec {
    std::array<int, 4> widths{16, 32, 64, 128};
    int in_channels = 3;
    int num_classes = 10;

    nlohmann::json to_json() const;
    static ClassifierSpec from_json(const nlohmann::json& j);
    bool operator==(const ClassifierSpec&) const = default;
};

/// Hidden layers whose activations are tapped: indices of stages, shallow to deep.
struct LayerSelection {
    std::vector<int> layers{0, 1, 2, 3};

    /// Strictly increasing, within [0, stage_count).
    void validate(int stage_count = 4) const;
    std::size_t size() const noexcept { return layers.size(); }
};

struct ClassifierOutput {
    torch::Tensor logits;
    /// Activation maps at each tapped layer, in LayerSelection order.
    std::vector<torch::Tensor> taps;
};

class TappedClassifierImpl : public torch::nn::Cloneable<TappedClassifierImpl> {
public:
    explicit TappedClassifierImpl(ClassifierSpec spec = {});

    void reset() override;

    torch::Tensor forward(const torch::Tensor& x);
    ClassifierOutput forward_tapped(const torch::Tensor& x, const LayerSelection& sel);

    /// Re-initializes the final linear layer, optionally changing the class count.
    void reset_head(int num_classes, std::uint64_t seed);

    torch::nn::Linear& head() { return head_; }
    /// Last convolution of the deepest stage (filter-pruning target).
    torch::nn::Conv2d last_conv();
    /// Weights of every conv and linear layer (pruning universe).
    std::vector<torch::Tensor> prunable_weights();

    const ClassifierSpec& spec() const noexcept { return spec_; }

private:
    ClassifierSpec spec_;
    std::vector<torch::nn::Sequential> stages_;
    torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(TappedClassifier);

/// Fresh classifier whose initial weights depend only on `seed`.
TappedClassifier make_classifier(const ClassifierSpec& spec, std::uint64_t seed);

/// Argmax predictions, evaluated in eval mode in chunks.
torch::Tensor predict(TappedClassifier& model, const torch::Tensor& images, int batch = 500);

/// Top-1 accuracy in percent.
double accuracy(TappedClassifier& model, const torch::Tensor& images, const torch::Tensor& labels);

}  // namespace keyauth
