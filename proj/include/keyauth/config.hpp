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

#include <nlohmann/json.hpp>

#include "keyauth/attacks.hpp"
#include "keyauth/classifier.hpp"
#include "keyauth/distill.hpp"
#include "keyauth/domain_data.hpp"
#include "keyauth/experts.hpp"
#include "keyauth/stegonet.hpp"
#include "keyauth/verify.hpp"

namespace keyauth {

struct DataConfig {
    /// "toy", a packed dataset file, or an image-folder root.
    std::string source = "toy";
    /// Optional separate test source; empty means a held-out split of `source` (or a fresh toy draw).
    std::string test_source;
    int64_t train_size = 4000;
    int64_t test_size = 1000;
    int image_size = 32;
    AugmentPolicy augment{{"hflip", 0.5}};
};

struct KeyConfig {
    int side = 16;
    int channels = 1;
};

/// Every input of the pipeline, loaded from an INI file.
struct PipelineConfig {
    std::string name = "desk";
    std::uint64_t seed = 0;
    DataConfig data;
    KeyConfig key;
    int64_t codec_train_size = 2500;
    CodecTrainConfig codec;
    int codec_hidden = 24;
    ClassifierSpec classifier;
    BaselineConfig baseline;
    RealConfig real;
    FakeConfig fake;
    DistillConfig distill;
    VerifyThresholds verify;
    int eps3 = 1;
    int64_t query_size = 100;
    FineTuneConfig finetune;
    TransferConfig transfer;
    ReverseConfig reverse;

    /// Pushes the shared seed and layer selection into the stage configs.
    void propagate();
    void validate() const;
    nlohmann::json to_json() const;
    CodecGeometry geometry() const;
};

/// Defaults above, overridden by `[section] key = value` entries. Unknown
/// sections or keys and malformed values raise FormatError naming the entry.
PipelineConfig parse_config(const std::string& ini_text);
PipelineConfig load_config(const std::filesystem::path& path);
/// Canonical INI dump of every key (round-trips through parse_config).
std::string config_to_ini(const PipelineConfig& cfg);
/// FNV-1a digest of the canonical dump, hex.
std::string config_hash(const PipelineConfig& cfg);

AugmentPolicy parse_policy(const std::string& text);
std::string policy_to_string(const AugmentPolicy& p);

}  // namespace keyauth
