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

#include "keyauth/mi_club.hpp"

#include <cmath>

#include "keyauth/error.hpp"
#include "keyauth/training.hpp"

namespace keyauth {

namespace nn = torch::nn;

AuxEstimatorImpl::AuxEstimatorImpl(int dim) : dim_(dim) {
    if (dim < 1) throw InvalidArgument("aux estimator dimension must be positive");
    reset();
}

void AuxEstimatorImpl::reset() {
    const int d = dim_;
    net_ = register_module("net", nn::Sequential(nn::Linear(d, 2 * d), nn::ReLU(), nn::Linear(2 * d, 2 * d),
                                                 nn::ReLU(), nn::Linear(2 * d, 2 * d)));
}

GaussianParams AuxEstimatorImpl::forward(const torch::Tensor& z) {
    if (z.dim() != 2 || z.size(1) != dim_)
        throw InvalidArgument("aux estimator expects [N," + std::to_string(dim_) + "] features");
    const auto out = net_->forward(z);
    return {out.slice(1, 0, dim_), out.slice(1, dim_, 2 * dim_).clamp(kLogvarMin, kLogvarMax)};
}

AuxEstimator make_aux(int dim, std::uint64_t seed) {
    torch::manual_seed(seed);
    return AuxEstimator(dim);
}

namespace {

void check_pairs(const AuxEstimator& est, const torch::Tensor& z, const torch::Tensor& zhat) {
    if (z.dim() != 2 || zhat.dim() != 2 || z.size(0) != zhat.size(0))
        throw InvalidArgument("feature pairs must be two [N,d] tensors of equal length");
    if (z.size(1) != est->dim() || zhat.size(1) != est->dim())
        throw InvalidArgument("feature dimension does not match the estimator (" + std::to_string(est->dim()) + ")");
    if (z.size(0) < 1) throw InvalidArgument("need at least one feature pair");
}

constexpr double kLog2Pi = 1.8378770664093453;

}  // namespace

torch::Tensor log_likelihood(AuxEstimator& est, const torch::Tensor& z, const torch::Tensor& zhat) {
    check_pairs(est, z, zhat);
    const auto q = est->forward(z);
    return (-0.5 * ((zhat - q.mean).pow(2) / q.logvar.exp() + q.logvar + kLog2Pi)).sum(1);
}

AuxFitter::AuxFitter(AuxEstimator est, double lr) : est_(std::move(est)), opt_(est_->parameters(), torch::optim::AdamOptions(lr)) {}

double AuxFitter::fit(const torch::Tensor& z, const torch::Tensor& zhat, int steps) {
    check_pairs(est_, z, zhat);
    if (steps < 0) throw InvalidArgument("fit steps must be non-negative");
    const auto zd = z.detach(), zh = zhat.detach();
    double last = 0.0;
    for (int s = 0; s < steps; ++s) {
        const auto loss = -log_likelihood(est_, zd, zh).mean();
        ++step_;
        require_finite(loss, step_, "aux estimator fitting");
        opt_.zero_grad();
        loss.backward();
        opt_.step();
        last = -loss.item<double>();
    }
    return last;
}

AuxEstimator fit_aux(AuxEstimator est, const torch::Tensor& z, const torch::Tensor& zhat, int steps, double lr) {
    AuxFitter fitter(est, lr);
    fitter.fit(z, zhat, steps);
    return fitter.estimator();
}

torch::Tensor club_mi(AuxEstimator& est, const torch::Tensor& z, const torch::Tensor& zhat) {
    check_pairs(est, z, zhat);
    const int64_t n = z.size(0), d = z.size(1);
    const auto q = est->forward(z);
    const auto inv_var = (-q.logvar).exp();
    // Rows m of the N x N table log q(zhat_n | z_m), a block of rows at a time.
    const int64_t rows = std::max<int64_t>(1, (1 << 22) / std::max<int64_t>(1, n * d));
    std::vector<torch::Tensor> terms;
    for (int64_t m0 = 0; m0 < n; m0 += rows) {
        const int64_t m1 = std::min(n, m0 + rows);
        const auto mu = q.mean.slice(0, m0, m1).unsqueeze(1);
        const auto iv = inv_var.slice(0, m0, m1).unsqueeze(1);
        const auto lv = q.logvar.slice(0, m0, m1).unsqueeze(1);
        const auto table = (-0.5 * ((zhat.unsqueeze(0) - mu).pow(2) * iv + lv + kLog2Pi)).sum(2);
        const auto diag = table.diagonal(m0, 0, 1);
        terms.push_back(diag - table.mean(1));
    }
    return torch::cat(terms).mean();
}

double estimate_mi(AuxEstimator& est, const torch::Tensor& z, const torch::Tensor& zhat) {
    torch::NoGradGuard guard;
    return club_mi(est, z, zhat).item<double>();
}

torch::Tensor pool_features(const torch::Tensor& activation) {
    if (activation.dim() == 2) return activation;
    if (activation.dim() != 4) throw InvalidArgument("pool_features expects [N,C,H,W] activations");
    return activation.mean({2, 3});
}

namespace {

std::pair<std::vector<torch::Tensor>, std::vector<torch::Tensor>> paired_taps(TappedClassifier& a, TappedClassifier& b,
                                                                              const torch::Tensor& xa,
                                                                              const torch::Tensor& xb,
                                                                              const LayerSelection& sel) {
    if (xa.size(0) != xb.size(0)) throw InvalidArgument("paired batches differ in length");
    torch::NoGradGuard guard;
    const bool ta = a->is_training(), tb = b->is_training();
    a->eval();
    b->eval();
    auto fa = a->forward_tapped(xa, sel).taps;
    auto fb = b->forward_tapped(xb, sel).taps;
    a->train(ta);
    b->train(tb);
    for (auto& f : fa) f = pool_features(f);
    for (auto& f : fb) f = pool_features(f);
    return {fa, fb};
}

}  // namespace

LayerMi multilayer_mi(TappedClassifier& model_a, TappedClassifier& model_b, const torch::Tensor& batch_a,
                      const torch::Tensor& batch_b, const LayerSelection& sel, std::vector<AuxEstimator>& ests) {
    if (ests.size() != sel.size()) throw InvalidArgument("need one estimator per selected layer");
    const auto [fa, fb] = paired_taps(model_a, model_b, batch_a, batch_b, sel);
    if (fa.size() != sel.size() || fb.size() != sel.size()) throw InvalidArgument("missing tap for a selected layer");
    LayerMi out;
    for (std::size_t l = 0; l < sel.size(); ++l) {
        out.per_layer.push_back(estimate_mi(ests[l], fa[l], fb[l]));
        out.total += out.per_layer.back();
    }
    return out;
}

std::vector<AuxEstimator> fit_layer_estimators(TappedClassifier& model_a, TappedClassifier& model_b,
                                               const torch::Tensor& batch_a, const torch::Tensor& batch_b,
                                               const LayerSelection& sel, int steps, double lr, std::uint64_t seed) {
    const auto [fa, fb] = paired_taps(model_a, model_b, batch_a, batch_b, sel);
    std::vector<AuxEstimator> ests;
    for (std::size_t l = 0; l < sel.size(); ++l)
        ests.push_back(fit_aux(make_aux(static_cast<int>(fa[l].size(1)), derive_seed(seed, l)), fa[l], fb[l], steps, lr));
    return ests;
}

MiCsvLog::MiCsvLog(const std::filesystem::path& path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw InvalidArgument("cannot open MI log " + path.string());
    if (fresh) out_ << "step,layer,mi\n";
}

void MiCsvLog::append(long step, int layer, double mi) {
    std::lock_guard lock(mu_);
    out_ << step << ',' << layer << ',' << mi << '\n';
    out_.flush();
}

void MiCsvLog::append(long step, const LayerSelection& sel, const std::vector<double>& values) {
    for (std::size_t l = 0; l < values.size() && l < sel.size(); ++l) append(step, sel.layers[l], values[l]);
}

}  // namespace keyauth
