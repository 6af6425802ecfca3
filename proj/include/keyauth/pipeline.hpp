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

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "keyauth/attacks.hpp"
#include "keyauth/config.hpp"
#include "keyauth/distill.hpp"
#include "keyauth/experts.hpp"
#include "keyauth/key_codec.hpp"
#include "keyauth/stegonet.hpp"
#include "keyauth/verify.hpp"

namespace keyauth {

/// runs/<name>/{codec,baseline,experts,protected,reports}, held exclusively
/// through an advisory lock on <root>/.lock for the lifetime of the object.
class RunDir {
public:
    RunDir(const std::filesystem::path& out, const PipelineConfig& cfg);
    ~RunDir();
    RunDir(const RunDir&) = delete;
    RunDir& operator=(const RunDir&) = delete;

    const std::filesystem::path& root() const { return root_; }
    const std::string& config_hash() const { return hash_; }
    const PipelineConfig& config() const { return cfg_; }

    std::filesystem::path codec_path() const { return root_ / "codec" / "codec.ckpt"; }
    std::filesystem::path baseline_path() const { return root_ / "baseline" / "model.ckpt"; }
    std::filesystem::path experts_path(const std::string& user) const { return root_ / "experts" / (user + ".ckpt"); }
    std::filesystem::path protected_path(const std::string& user) const { return root_ / "protected" / (user + ".ckpt"); }
    std::filesystem::path registry_path() const { return root_ / "protected" / "registry.jsonl"; }
    std::filesystem::path reports() const { return root_ / "reports"; }

    /// Throws PreconditionError naming `stage` when the artifact is missing or
    /// was produced under a different config hash.
    void require(const std::filesystem::path& artifact, const std::string& stage) const;

private:
    std::filesystem::path root_;
    PipelineConfig cfg_;
    std::string hash_;
    int lock_fd_ = -1;
};

/// Appends "step,metric,value" rows.
class CsvMetrics {
public:
    CsvMetrics(const std::filesystem::path& path, const std::string& stage);
    MetricsSink sink();

private:
    std::shared_ptr<std::ofstream> out_;
    std::string stage_;
};

struct RunData {
    Dataset train;
    Dataset test;
    /// Images the codec is trained on.
    Dataset codec_train;
    /// Held-out images for codec round-trip checks.
    Dataset codec_test;
};
RunData load_run_data(const PipelineConfig& cfg);

/// Key for a user id: seeded uniform bits, seed derived from the run seed and the id.
UserKey user_key(const PipelineConfig& cfg, const std::string& user_id);

struct AccuracyTriple {
    double authorized = 0, benign = 0, noise = 0;
    nlohmann::json to_json() const { return {{"authorized", authorized}, {"benign", benign}, {"noise", noise}}; }
};
/// Accuracy of `model` on test images encoded with `key`, raw, and encoded with per-sample wrong keys.
AccuracyTriple accuracy_triple(TappedClassifier& model, StegoCodec& codec, const Dataset& test, const UserKey& key,
                               std::uint64_t seed);

StegoCodec stage_train_codec(RunDir& run, const RunData& data);
TappedClassifier stage_train_baseline(RunDir& run, const RunData& data);

struct ProtectOutcome {
    std::string user_id;
    ProtectedModel model;
    AccuracyTriple triple;
    /// Expert accuracies on held-out images; empty when the student was reused.
    nlohmann::json teacher = nlohmann::json::object();
    bool reused = false;
};
/// Runs the per-user protection pipeline, reusing any stage checkpoint already present.
std::vector<ProtectOutcome> stage_protect(RunDir& run, const RunData& data, const std::vector<std::string>& users,
                                          bool simple_distill = false);

/// Accuracy of every registered protected model on test images encoded with
/// every registered key; written to reports/confusion.json.
nlohmann::json stage_confusion(RunDir& run, const RunData& data);

StegoCodec load_run_codec(const RunDir& run);
TappedClassifier load_run_baseline(const RunDir& run, double* test_accuracy = nullptr);
KeyRegistry load_run_registry(const RunDir& run);

/// Human-readable aggregate of everything under reports/, plus the same as JSON.
/// Refuses directories whose artifacts carry different config hashes.
std::string build_report(const std::filesystem::path& run_root, std::vector<std::string>* warnings = nullptr);

}  // namespace keyauth
