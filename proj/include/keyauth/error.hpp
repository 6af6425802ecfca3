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

#include <memory>
#include <stdexcept>
#include <string>

namespace keyauth {

struct Checkpoint;

/// Thrown when a caller violates an operation precondition (shape, range, unknown name).
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Thrown when an optimization loop diverges. `last_stable_step` is the last
/// step whose loss was finite; `last_stable` (may be null) holds the model
/// state saved at the most recent stable point.
class TrainingFailure : public std::runtime_error {
public:
    TrainingFailure(const std::string& what, long last_stable_step,
                    std::shared_ptr<const Checkpoint> last_stable = nullptr)
        : std::runtime_error(what), last_stable_step_(last_stable_step), last_stable_(std::move(last_stable)) {}
    long last_stable_step() const noexcept { return last_stable_step_; }
    const std::shared_ptr<const Checkpoint>& last_stable() const noexcept { return last_stable_; }

private:
    long last_stable_step_;
    std::shared_ptr<const Checkpoint> last_stable_;
};

/// A pipeline stage was asked to run before the artifact it depends on exists.
class PreconditionError : public std::runtime_error {
public:
    PreconditionError(const std::string& stage, const std::string& what)
        : std::runtime_error(what), stage_(stage) {}
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// A suspect-model endpoint failed to answer.
class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed file on disk (checkpoint, registry, dataset, config).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace keyauth
