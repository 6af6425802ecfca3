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
#include <fstream>
#include <memory>
#include <mutex>
#include <vector>

#include <torch/torch.h>

#include "keyauth/classifier.hpp"

namespace keyauth {

struct GaussianParams {
    torch::Tensor mean;
    torch::Tensor logvar;
};

/// Conditional diagonal Gaussian q(zhat | z): MLP d -> 2d -> 2d -> (mean, logvar).
class AuxEstimatorImpl : public torch::nn::Cloneable<AuxEstimatorImpl> {
public:
    static constexpr double kLogvarMin = -10.0;
    static constexpr double kLogvarMax = 10.0;

    explicit AuxEstimatorImpl(int dim = 1);
    void reset() override;
    GaussianParams forward(const torch::Tensor& z);
    int dim() const noexcept { return dim_; }

private:
    int dim_;
    torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(AuxEstimator);

AuxEstimator make_aux(int dim, std::uint64_t seed);

/// Per-sample log q(zhat_i | z_i).
torch::Tensor log_likelihood(AuxEstimator& est, const torch::Tensor& z, const torch::Tensor& zhat);

/// Keeps optimizer state across repeated fitting rounds.
class AuxFitter {
public:
    AuxFitter(AuxEstimator est, double lr);
    /// `steps` maximum-likelihood steps on the given pairs; returns the last mean log-likelihood.
    double fit(const torch::Tensor& z, const torch::Tensor& zhat, int steps);
    AuxEstimator& estimator() { return est_; }

private:
    AuxEstimator est_;
    torch::optim::Adam opt_;
    long step_ = 0;
};

/// Fresh-optimizer fitting. Zero steps leave the estimator unchanged.
AuxEstimator fit_aux(AuxEstimator est, const torch::Tensor& z, const torch::Tensor& zhat, int steps, double lr);

/// (1/N) sum_m [log q(zhat_m|z_m) - (1/N) sum_n log q(zhat_n|z_m)] over all N^2
/// pairings. Differentiable in z, zhat and the estimator.
torch::Tensor club_mi(AuxEstimator& est, const torch::Tensor& z, const torch::Tensor& zhat);

/// club_mi as a number, computed without gradients.
double estimate_mi(AuxEstimator& est, const torch::Tensor& z, const torch::Tensor& zhat);

/// Spatial global average pool of activation maps to [N, C] vectors.
torch::Tensor pool_features(const torch::Tensor& activation);

struct LayerMi {
    std::vector<double> per_layer;
    double total = 0.0;
};

/// Per-layer CLUB values between model_a(batch_a) and model_b(batch_b) taps.
LayerMi multilayer_mi(TappedClassifier& model_a, TappedClassifier& model_b, const torch::Tensor& batch_a,
                      const torch::Tensor& batch_b, const LayerSelection& sel, std::vector<AuxEstimator>& ests);

/// Freshly fitted per-layer estimators for the feature pairs of the two models.
std::vector<AuxEstimator> fit_layer_estimators(TappedClassifier& model_a, TappedClassifier& model_b,
                                               const torch::Tensor& batch_a, const torch::Tensor& batch_b,
                                               const LayerSelection& sel, int steps, double lr, std::uint64_t seed);

/// Appends "step,layer,mi" rows; writes the header when the file is new.
class MiCsvLog {
public:
    explicit MiCsvLog(const std::filesystem::path& path);
    void append(long step, int layer, double mi);
    void append(long step, const LayerSelection& sel, const std::vector<double>& values);

private:
    std::ofstream out_;
    std::mutex mu_;
};

}  // namespace keyauth
