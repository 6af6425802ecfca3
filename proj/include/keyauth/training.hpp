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

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace keyauth {

/// Linear warm-up over the first `warmup` fraction of steps, cosine decay after.
class WarmupCosine {
public:
    WarmupCosine(double peak_lr, long total_steps, double warmup = 0.15)
        : peak_(peak_lr), total_(std::max(total_steps, 1L)), warmup_(warmup) {}

    double at(long step) const {
        const double t = static_cast<double>(step) / static_cast<double>(total_);
        if (t < warmup_) return peak_ * (0.04 + 0.96 * t / warmup_);
        const double u = std::min(1.0, (t - warmup_) / (1.0 - warmup_));
        return peak_ * 0.5 * (1.0 + std::cos(M_PI * u));
    }

private:
    double peak_;
    long total_;
    double warmup_;
};

template <typename Optimizer>
void set_learning_rate(Optimizer& opt, double lr) {
    for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

/// Seeded permutation of [0, n) split into batches of at most `batch` indices.
std::vector<torch::Tensor> shuffled_batches(int64_t n, int64_t batch, torch::Generator& gen);

/// torch::Generator on CPU seeded deterministically.
torch::Generator make_generator(std::uint64_t seed);

/// Throws TrainingFailure if `loss` is not finite.
void require_finite(const torch::Tensor& loss, long step, const std::string& what);

/// Splits `extra` into a fresh seed derived from `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t extra);

/// Called after each epoch / logging point with (step, named scalar values).
using MetricsSink = std::function<void(long, const std::vector<std::pair<std::string, double>>&)>;

}  // namespace keyauth
