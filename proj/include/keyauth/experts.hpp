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
#include <string>

#include <torch/torch.h>

#include "keyauth/classifier.hpp"
#include "keyauth/domain_data.hpp"
#include "keyauth/mi_club.hpp"
#include "keyauth/training.hpp"

namespace keyauth {

struct BaselineConfig {
    int epochs = 10;
    int batch = 64;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    AugmentPolicy augment{{"hflip", 0.5}};
    std::uint64_t seed = 0;
};

/// Cross-entropy training from scratch (momentum SGD, warm-up + cosine schedule).
TappedClassifier train_baseline(const Dataset& train, const ClassifierSpec& spec, const BaselineConfig& cfg,
                                const MetricsSink& sink = {});

struct RealConfig {
    int epochs = 2;
    int batch = 64;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    AugmentPolicy augment{{"hflip", 0.5}};
    std::uint64_t seed = 0;
};

/// Copy of `base` fine-tuned with cross-entropy on authorized images only.
/// `tag` names the domain of `data` and must be authorized.
TappedClassifier finetune_real(const TappedClassifier& base, const Dataset& data, Domain tag, const RealConfig& cfg,
                               const MetricsSink& sink = {});
/// Same on the triple's authorized domain, augmenting covers before encoding.
TappedClassifier finetune_real(const TappedClassifier& base, DomainTriple& triple, const RealConfig& cfg,
                               const MetricsSink& sink = {});

struct FakeConfig {
    int iters = 300;
    int batch = 64;
    double lr = 1e-3;
    double aux_lr = 1e-3;
    /// Estimator fitting steps per fake-expert step.
    int aux_steps = 5;
    LayerSelection layers;
    std::uint64_t seed = 0;
    /// Per-layer CLUB values are appended here every `log_every` iterations when set.
    std::filesystem::path mi_log;
    int log_every = 25;
};

/// Randomly initialized classifier whose tapped features on `pair_domain`
/// images are driven to low CLUB mutual information with the frozen real
/// expert's features on the paired authorized images. No label loss.
TappedClassifier train_fake(TappedClassifier& real, Domain pair_domain, DomainTriple& triple, const FakeConfig& cfg,
                            const MetricsSink& sink = {});

struct ExpertEnsemble {
    TappedClassifier real{nullptr};
    TappedClassifier fake_benign{nullptr};
    TappedClassifier fake_noise{nullptr};
    std::string key_fingerprint;

    TappedClassifier& expert(Domain tag);
    void eval();
};

/// Dispatch by domain tag: authorized -> real, benign -> fake_benign, noise -> fake_noise.
ClassifierOutput moe_forward(ExpertEnsemble& ens, const torch::Tensor& x, Domain tag, const LayerSelection& sel = {});
/// Per-sample tags (int64 Domain values); outputs are reassembled in input order.
ClassifierOutput moe_forward(ExpertEnsemble& ens, const torch::Tensor& x, const torch::Tensor& tags,
                             const LayerSelection& sel = {});

void save_classifier(const std::filesystem::path& path, const TappedClassifier& model, const nlohmann::json& extra = {});
TappedClassifier load_classifier(const std::filesystem::path& path);
TappedClassifier classifier_from_checkpoint(const Checkpoint& ck);
Checkpoint classifier_checkpoint(const TappedClassifier& model, const nlohmann::json& extra = {});

void save_ensemble(const std::filesystem::path& path, const ExpertEnsemble& ens, const nlohmann::json& extra = {});
ExpertEnsemble load_ensemble(const std::filesystem::path& path);

}  // namespace keyauth
