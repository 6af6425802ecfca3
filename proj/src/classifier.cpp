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

#include "keyauth/classifier.hpp"

#include "keyauth/error.hpp"

namespace keyauth {

namespace nn = torch::nn;

nlohmann::json ClassifierSpec::to_json() const {
    return {{"widths", widths}, {"in_channels", in_channels}, {"num_classes", num_classes}};
}

ClassifierSpec ClassifierSpec::from_json(const nlohmann::json& j) {
    ClassifierSpec s;
    s.widths = j.at("widths").get<std::array<int, 4>>();
    s.in_channels = j.at("in_channels").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    return s;
}

void LayerSelection::validate(int stage_count) const {
    if (layers.empty()) throw InvalidArgument("layer selection is empty");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i] < 0 || layers[i] >= stage_count)
            throw InvalidArgument("layer selection names stage " + std::to_string(layers[i]) +
                                  " which the backbone does not have");
        if (i > 0 && layers[i] <= layers[i - 1])
            throw InvalidArgument("layer selection must be strictly increasing in depth");
    }
}

TappedClassifierImpl::TappedClassifierImpl(ClassifierSpec spec) : spec_(spec) {
    for (int w : spec_.widths)
        if (w < 1) throw InvalidArgument("classifier widths must be positive");
    if (spec_.num_classes < 2) throw InvalidArgument("classifier needs at least two classes");
    reset();
}

void TappedClassifierImpl::reset() {
    stages_.clear();
    int in = spec_.in_channels;
    for (std::size_t s = 0; s < spec_.widths.size(); ++s) {
        const int out = spec_.widths[s];
        nn::Sequential stage(
            nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1).bias(false)), nn::BatchNorm2d(out),
            nn::ReLU(), nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)),
            nn::BatchNorm2d(out), nn::ReLU());
        stages_.push_back(register_module("stage" + std::to_string(s), stage));
        in = out;
    }
    head_ = register_module("head", nn::Linear(in, spec_.num_classes));
}

torch::Tensor TappedClassifierImpl::forward(const torch::Tensor& x) {
    auto h = x;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        if (s > 0) h = torch::max_pool2d(h, 2);
        h = stages_[s]->forward(h);
    }
    return head_->forward(h.mean({2, 3}));
}

ClassifierOutput TappedClassifierImpl::forward_tapped(const torch::Tensor& x, const LayerSelection& sel) {
    sel.validate(static_cast<int>(stages_.size()));
    ClassifierOutput out;
    auto h = x;
    std::size_t next = 0;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
        if (s > 0) h = torch::max_pool2d(h, 2);
        h = stages_[s]->forward(h);
        if (next < sel.layers.size() && sel.layers[next] == static_cast<int>(s)) {
            out.taps.push_back(h);
            ++next;
        }
    }
    out.logits = head_->forward(h.mean({2, 3}));
    return out;
}

void TappedClassifierImpl::reset_head(int num_classes, std::uint64_t seed) {
    if (num_classes < 2) throw InvalidArgument("reset_head: need at least two classes");
    torch::manual_seed(seed);
    spec_.num_classes = num_classes;
    const int in = spec_.widths.back();
    head_ = replace_module("head", nn::Linear(in, num_classes));
}

// Looked up on each call: clone() replaces the stage's children, so a cached
// holder would point at a detached layer.
nn::Conv2d TappedClassifierImpl::last_conv() {
    return nn::Conv2d(std::dynamic_pointer_cast<nn::Conv2dImpl>(stages_.back()->ptr(3)));
}

std::vector<torch::Tensor> TappedClassifierImpl::prunable_weights() {
    std::vector<torch::Tensor> ws;
    for (auto& stage : stages_)
        for (const auto& m : stage->children())
            if (auto conv = std::dynamic_pointer_cast<nn::Conv2dImpl>(m)) ws.push_back(conv->weight);
    ws.push_back(head_->weight);
    return ws;
}

TappedClassifier make_classifier(const ClassifierSpec& spec, std::uint64_t seed) {
    torch::manual_seed(seed);
    return TappedClassifier(spec);
}

torch::Tensor predict(TappedClassifier& model, const torch::Tensor& images, int batch) {
    torch::NoGradGuard guard;
    const bool was_training = model->is_training();
    model->eval();
    std::vector<torch::Tensor> parts;
    for (int64_t b = 0; b < images.size(0); b += batch)
        parts.push_back(model->forward(images.slice(0, b, std::min<int64_t>(b + batch, images.size(0)))).argmax(1));
    model->train(was_training);
    return parts.empty() ? torch::empty({0}, torch::kInt64) : torch::cat(parts);
}

double accuracy(TappedClassifier& model, const torch::Tensor& images, const torch::Tensor& labels) {
    if (images.size(0) == 0) return 0.0;
    const auto pred = predict(model, images);
    return 100.0 * pred.eq(labels).sum().item<double>() / static_cast<double>(images.size(0));
}

}  // namespace keyauth
