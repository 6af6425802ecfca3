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

#include <cstdio>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "keyauth/classifier.hpp"
#include "keyauth/domain_data.hpp"
#include "keyauth/key_codec.hpp"
#include "keyauth/stegonet.hpp"

namespace keyauth {

/// Opaque suspect model: images in, predicted labels out.
class Endpoint {
public:
    virtual ~Endpoint() = default;
    /// One label per image of an [N,3,H,W] batch. Throws TransportError on failure.
    virtual std::vector<int64_t> query(const torch::Tensor& images) = 0;
    virtual std::string describe() const = 0;
};

/// In-process adapter around a loaded classifier.
class ModelEndpoint : public Endpoint {
public:
    explicit ModelEndpoint(TappedClassifier model, std::string label = "model");
    std::vector<int64_t> query(const torch::Tensor& images) override;
    std::string describe() const override { return label_; }

private:
    TappedClassifier model_;
    std::string label_;
};

/// Child process speaking the line protocol: one image file path per request
/// line on its stdin, one integer label per response line on its stdout.
class ProcessEndpoint : public Endpoint {
public:
    /// `argv[0]` is the executable; looked up on PATH when it has no slash.
    explicit ProcessEndpoint(std::vector<std::string> argv);
    ~ProcessEndpoint() override;
    ProcessEndpoint(const ProcessEndpoint&) = delete;
    ProcessEndpoint& operator=(const ProcessEndpoint&) = delete;

    std::vector<int64_t> query(const torch::Tensor& images) override;
    std::string describe() const override;

private:
    void close();

    std::vector<std::string> argv_;
    int pid_ = -1;
    std::FILE* to_child_ = nullptr;
    std::FILE* from_child_ = nullptr;
    std::filesystem::path scratch_;
    long counter_ = 0;
};

/// Lossless float image file used by the line protocol ([3,H,W] float32 in [0,1]).
void save_image_file(const std::filesystem::path& path, const torch::Tensor& image);
torch::Tensor load_image_file(const std::filesystem::path& path);

/// Server side of the line protocol: reads paths from `in` until EOF, writes
/// the predicted label (or "error: ...") per line to `out`. Returns the number
/// of requests answered.
long serve_line_protocol(TappedClassifier& model, std::FILE* in, std::FILE* out);

struct TraceReport {
    double eps3 = 1;
    std::vector<std::string> user_ids;
    /// Per registered key, fraction of images whose extracted key is within eps3.
    std::vector<double> tsr;
    std::optional<std::string> culprit;
    double confidence = 0.0;
    std::vector<int> nearest_distance;

    nlohmann::json to_json() const;
};

/// Decode every intercepted image and score each registry key against the extracted keys.
TraceReport trace_intercepted(const torch::Tensor& images, StegoCodec& codec, const KeyRegistry& registry,
                              int eps3 = 1);

enum class Verdict { innocent, pirated, inconclusive };
std::string verdict_name(Verdict v);

struct KeyAccuracy {
    std::string user_id;
    double accuracy = 0.0;
    bool unlocks = false;
};

struct VerificationReport {
    Verdict verdict = Verdict::inconclusive;
    std::optional<std::string> matched_user;
    double benign_accuracy = 0.0;
    std::vector<KeyAccuracy> per_key;
    double eps1 = 5.0;
    double eps2 = 30.0;
    double baseline_accuracy = 0.0;
    bool collusion = false;
    /// Set when the endpoint failed mid-protocol; the table holds what was measured.
    std::optional<std::string> error;

    nlohmann::json to_json() const;
};

struct VerifyThresholds {
    double eps1 = 5.0;
    double eps2 = 30.0;
};

/// Query the endpoint on D_q and on D_q encoded with each registered key.
/// A key unlocks when baseline - acc_k < eps1 and acc_k - acc_benign > eps2.
/// Exactly one unlocking key: pirated. Two or more: inconclusive with the
/// collusion flag. None: innocent when the benign accuracy is itself within
/// eps2 of the baseline, inconclusive otherwise.
VerificationReport blackbox_verify(Endpoint& endpoint, const Dataset& queries, StegoCodec& codec,
                                   const KeyRegistry& registry, const VerifyThresholds& thr, double baseline_accuracy);

/// Ground truth for one suspect: empty culprit means innocent.
struct SuspectOutcome {
    std::optional<std::string> true_culprit;
    VerificationReport report;
};

bool traced_correctly(const SuspectOutcome& s);
double tracing_accuracy(const std::vector<SuspectOutcome>& results);

}  // namespace keyauth
