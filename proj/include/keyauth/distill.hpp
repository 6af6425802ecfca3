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
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "keyauth/classifier.hpp"
#include "keyauth/domain_data.hpp"
#include "keyauth/experts.hpp"
#include "keyauth/training.hpp"

namespace keyauth {

struct DistillConfig {
    double lambda_at = 0.1;
    double lambda_crd = 0.05;
    double alpha = 2.0;
    double temperature = 4.0;
    int negatives = 4;
    int epochs = 12;
    int batch = 64;
    double lr = 1e-3;
    int projection = 128;
    AugmentPolicy augment{{"hflip", 0.5}};
    LayerSelection layers;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static DistillConfig from_json(const nlohmann::json& j);
};

/// KL(softmax(teacher/tau) || softmax(student/tau)), averaged over the batch.
torch::Tensor kl_loss(const torch::Tensor& student_logits, const torch::Tensor& teacher_logits, double tau);

/// Sum over channels of |f|^alpha: [N,C,H,W] -> [N,H,W] (or [C,H,W] -> [H,W]).
torch::Tensor attention_map(const torch::Tensor& f, double alpha = 2.0);

/// Batch mean of the L2 distance between L2-normalized flattened attention maps.
torch::Tensor at_loss(const torch::Tensor& teacher_f, const torch::Tensor& student_f, double alpha = 2.0);
/// Sum of at_loss over the selected layers.
torch::Tensor at_loss(const std::vector<torch::Tensor>& teacher_f, const std::vector<torch::Tensor>& student_f,
                      double alpha = 2.0);

/// Bilinear score of projected teacher/student vectors squashed into (0,1).
class CrdCriticImpl : public torch::nn::Cloneable<CrdCriticImpl> {
public:
    static constexpr double kEps = 1e-7;

    CrdCriticImpl(int teacher_dim = 1, int student_dim = 1, int projection = 128);
    void reset() override;
    torch::Tensor forward(const torch::Tensor& teacher, const torch::Tensor& student);

    torch::nn::Bilinear& score() { return score_; }

private:
    int teacher_dim_, student_dim_, projection_;
    torch::nn::Linear proj_t_{nullptr}, proj_s_{nullptr};
    torch::nn::Bilinear score_{nullptr};
};
TORCH_MODULE(CrdCritic);

/// -sum_l E_pos[log h] - negatives * sum_l E_neg[log(1-h)]. Positives pair the
/// teacher and student views of one sample; each sample gets `negatives`
/// teacher vectors drawn (with replacement) from samples of other domains.
torch::Tensor crd_loss(const std::vector<torch::Tensor>& teacher_f, const std::vector<torch::Tensor>& student_f,
                       const torch::Tensor& tags, std::vector<CrdCritic>& critics, int negatives,
                       torch::Generator& gen);

/// The distributable student bound to one user key.
struct ProtectedModel {
    TappedClassifier model{nullptr};
    std::string user_id;
    std::string key_fingerprint;
    nlohmann::json config = nlohmann::json::object();
};

void save_protected(const std::filesystem::path& path, const ProtectedModel& pm, const nlohmann::json& extra = {});
ProtectedModel load_protected(const std::filesystem::path& path);

/// Student trained from scratch on W against the tag-dispatched ensemble.
ProtectedModel distill_student(ExpertEnsemble& ens, DomainTriple& triple, const DistillConfig& cfg,
                               const MetricsSink& sink = {});

}  // namespace keyauth
