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
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "keyauth/classifier.hpp"
#include "keyauth/domain_data.hpp"
#include "keyauth/stegonet.hpp"

namespace keyauth {

struct AttackResult {
    std::string attack;
    nlohmann::json params = nlohmann::json::object();
    double benign_accuracy = 0.0;
    double authorized_accuracy = 0.0;
    double baseline_accuracy = 0.0;

    static std::string csv_header();
    std::string csv_row() const;
};

/// Held-out evaluation sets shared by every attack.
struct AttackEval {
    Dataset benign;
    /// Same images encoded with the owner key.
    torch::Tensor authorized;
    double baseline_accuracy = 0.0;
};

enum class FineTuneStrategy { FTAL, FTLL, RTAL, RTLL };
FineTuneStrategy parse_strategy(const std::string& name);
std::string strategy_name(FineTuneStrategy s);

struct FineTuneConfig {
    FineTuneStrategy strategy = FineTuneStrategy::FTAL;
    double data_fraction = 0.3;
    int epochs = 30;
    /// Baseline learning rate x 0.1 by default.
    double lr = 0.005;
    int batch = 64;
    std::uint64_t seed = 0;
};

/// Copy of `model` fine-tuned on a benign subset according to the strategy.
TappedClassifier finetune_copy(const TappedClassifier& model, const Dataset& train, const FineTuneConfig& cfg);
AttackResult finetune_attack(const TappedClassifier& model, const Dataset& train, const FineTuneConfig& cfg,
                             const AttackEval& eval);

/// Global magnitude pruning: exactly round(amount * total) smallest-|w| weights
/// over every conv and linear weight are set to zero.
TappedClassifier prune_weights(const TappedClassifier& model, double amount);
/// Zeroes the round(amount * filters) filters of the last conv layer with the
/// smallest L1 norm.
TappedClassifier prune_filters(const TappedClassifier& model, double amount);
/// Fraction of exactly-zero entries over the prunable weights.
double weight_sparsity(TappedClassifier& model);
int64_t prunable_count(TappedClassifier& model);

enum class PruneMode { WP, FP };
PruneMode parse_prune_mode(const std::string& name);
AttackResult prune_attack(const TappedClassifier& model, PruneMode mode, double amount, const AttackEval& eval);

struct TransferConfig {
    int epochs = 10;
    double lr = 0.01;
    int batch = 64;
    std::uint64_t seed = 0;
};

/// New head for the target task; only the head trains. Returns the accuracy on `target_test`.
TappedClassifier transfer_copy(const TappedClassifier& model, const Dataset& target_train, const TransferConfig& cfg);
AttackResult transfer_attack(const TappedClassifier& model, const Dataset& target_train, const Dataset& target_test,
                             const TransferConfig& cfg, double reference_accuracy);

/// Encoder-shaped image-to-image network without the key input.
class ReverseGeneratorImpl : public torch::nn::Cloneable<ReverseGeneratorImpl> {
public:
    explicit ReverseGeneratorImpl(int hidden = 24, int channels = 3);
    void reset() override;
    torch::Tensor forward(const torch::Tensor& x);

private:
    int hidden_, channels_;
    torch::nn::Sequential features_{nullptr}, dense1_{nullptr}, dense2_{nullptr};
    torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(ReverseGenerator);

struct ReverseConfig {
    int steps = 1000;
    int batch = 64;
    double lr = 1e-3;
    double lambda_mse = 10.0;
    int hidden = 24;
    std::uint64_t seed = 0;
};

/// Trains a generator so the frozen model classifies G(x) correctly
/// (cross-entropy). With `authorized_pairs` (same order as `benign`) the
/// generator is also pulled to the authorized images by lambda_mse * MSE.
/// Reported benign accuracy is the model on G(eval.benign).
AttackResult reverse_engineer(const TappedClassifier& model, const Dataset& benign,
                              const std::optional<torch::Tensor>& authorized_pairs, const ReverseConfig& cfg,
                              const AttackEval& eval, ReverseGenerator* trained = nullptr);

/// Line plot of benign/authorized accuracy against the pruning amount.
void write_prune_svg(const std::filesystem::path& path, const std::vector<AttackResult>& rows, const std::string& title);

}  // namespace keyauth
