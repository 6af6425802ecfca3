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

#include "keyauth/training.hpp"

#include "keyauth/error.hpp"

namespace keyauth {

std::vector<torch::Tensor> shuffled_batches(int64_t n, int64_t batch, torch::Generator& gen) {
    const auto perm = torch::randperm(n, gen, torch::TensorOptions().dtype(torch::kInt64));
    std::vector<torch::Tensor> out;
    for (int64_t b = 0; b < n; b += batch) out.push_back(perm.slice(0, b, std::min(b + batch, n)));
    return out;
}

torch::Generator make_generator(std::uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return gen;
}

void require_finite(const torch::Tensor& loss, long step, const std::string& what) {
    if (!std::isfinite(loss.item<double>()))
        throw TrainingFailure(what + " diverged (non-finite loss) at step " + std::to_string(step), step - 1);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t extra) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (extra + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace keyauth
