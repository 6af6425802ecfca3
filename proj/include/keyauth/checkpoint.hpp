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
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace keyauth {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// Versioned binary container: magic, format version, JSON metadata, then
/// named arrays (float32 or int64, little-endian, shape-prefixed).
struct Checkpoint {
    static constexpr std::uint32_t kFormatVersion = 1;

    nlohmann::json meta = nlohmann::json::object();
    NamedTensors arrays;

    const torch::Tensor* find(const std::string& name) const;
    /// Arrays whose name starts with `prefix.`, with the prefix stripped.
    NamedTensors section(const std::string& prefix) const;
    void add_section(const std::string& prefix, const NamedTensors& tensors);
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Parameters followed by buffers, detached and contiguous on CPU.
NamedTensors module_state(const torch::nn::Module& module);

/// Copies tensors into a module's parameters/buffers by name; every entry of
/// the module must be present with a matching shape.
void load_module_state(torch::nn::Module& module, const NamedTensors& state);

/// Order-stable digest of all parameters and buffers, used to prove a module
/// was left untouched.
std::string module_digest(const torch::nn::Module& module);

/// Deep copy of a module via its clone() (all keyauth modules are Cloneable).
template <typename Holder>
Holder clone_module(const Holder& m) {
    return Holder(std::dynamic_pointer_cast<typename Holder::Impl>(m->clone()));
}

}  // namespace keyauth
