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

#include "keyauth/attacks.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "keyauth/checkpoint.hpp"
#include "keyauth/error.hpp"
#include "keyauth/training.hpp"

namespace keyauth {

namespace F = torch::nn::functional;
namespace nn = torch::nn;

std::string AttackResult::csv_header() { return "attack,params,benign_acc,authorized_acc,baseline"; }

std::string AttackResult::csv_row() const {
    std::string p = params.dump();
    std::string quoted = "\"";
    for (char c : p) quoted += c == '"' ? std::string("\"\"") : std::string(1, c);
    quoted += "\"";
    std::ostringstream os;
    os << attack << ',' << quoted << ',' << std::fixed << std::setprecision(2) << benign_accuracy << ','
       << authorized_accuracy << ',' << baseline_accuracy;
    return os.str();
}

FineTuneStrategy parse_strategy(const std::string& name) {
    if (name == "FTAL") return FineTuneStrategy::FTAL;
    if (name == "FTLL") return FineTuneStrategy::FTLL;
    if (name == "RTAL") return FineTuneStrategy::RTAL;
    if (name == "RTLL") return FineTuneStrategy::RTLL;
    throw InvalidArgument("unknown fine-tuning strategy '" + name + "' (FTAL, FTLL, RTAL, RTLL)");
}

std::string strategy_name(FineTuneStrategy s) {
    switch (s) {
        case FineTuneStrategy::FTAL: return "FTAL";
        case FineTuneStrategy::FTLL: return "FTLL";
        case FineTuneStrategy::RTAL: return "RTAL";
        case FineTuneStrategy::RTLL: return "RTLL";
    }
    return "?";
}

namespace {

void fill_eval(AttackResult& r, TappedClassifier& m, const AttackEval& eval) {
    r.benign_accuracy = accuracy(m, eval.benign.images, eval.benign.labels);
    r.authorized_accuracy = eval.authorized.defined() ? accuracy(m, eval.authorized, eval.benign.labels) : 0.0;
    r.baseline_accuracy = eval.baseline_accuracy;
}

// Trains with only `params` updated; when `features_frozen` the backbone stays
// in eval mode so normalization statistics do not drift either.
void train_subset(TappedClassifier& m, const Dataset& data, std::vector<torch::Tensor> params, bool features_frozen,
                  int epochs, double lr, int batch, std::uint64_t seed, const std::string& what) {
    if (epochs == 0) return;
    torch::optim::SGD opt(params, torch::optim::SGDOptions(lr).momentum(0.9).weight_decay(5e-4));
    auto gen = make_generator(seed);
    long step = 0;
    for (int e = 0; e < epochs; ++e) {
        if (features_frozen) {
            m->eval();
        } else {
            m->train();
        }
        for (const auto& idx : shuffled_batches(data.size(), batch, gen)) {
            const auto loss = F::cross_entropy(m->forward(data.images.index_select(0, idx)), data.labels.index_select(0, idx));
            ++step;
            require_finite(loss, step, what);
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
    }
    m->eval();
}

}  // namespace

TappedClassifier finetune_copy(const TappedClassifier& model, const Dataset& train, const FineTuneConfig& cfg) {
    if (cfg.data_fraction <= 0 || cfg.data_fraction > 1) throw InvalidArgument("fine-tune fraction must be in (0, 1]");
    if (cfg.epochs < 0) throw InvalidArgument("fine-tune epochs must be non-negative");
    auto m = clone_module(model);
    const auto subset = train.sample_fraction(cfg.data_fraction, derive_seed(cfg.seed, 31));
    const bool reinit = cfg.strategy == FineTuneStrategy::RTAL || cfg.strategy == FineTuneStrategy::RTLL;
    const bool last_only = cfg.strategy == FineTuneStrategy::FTLL || cfg.strategy == FineTuneStrategy::RTLL;
    if (reinit) m->reset_head(m->spec().num_classes, derive_seed(cfg.seed, 32));
    std::vector<torch::Tensor> params = last_only ? m->head()->parameters() : m->parameters();
    train_subset(m, subset, params, last_only, cfg.epochs, cfg.lr, cfg.batch, derive_seed(cfg.seed, 33),
                 "fine-tuning attack");
    return m;
}

AttackResult finetune_attack(const TappedClassifier& model, const Dataset& train, const FineTuneConfig& cfg,
                             const AttackEval& eval) {
    auto m = finetune_copy(model, train, cfg);
    AttackResult r;
    r.attack = strategy_name(cfg.strategy);
    r.params = {{"fraction", cfg.data_fraction}, {"epochs", cfg.epochs}, {"lr", cfg.lr}, {"batch", cfg.batch}, {"seed", cfg.seed}};
    fill_eval(r, m, eval);
    return r;
}

int64_t prunable_count(TappedClassifier& model) {
    int64_t n = 0;
    for (const auto& w : model->prunable_weights()) n += w.numel();
    return n;
}

double weight_sparsity(TappedClassifier& model) {
    int64_t zeros = 0, n = 0;
    for (const auto& w : model->prunable_weights()) {
        zeros += w.eq(0).sum().item<int64_t>();
        n += w.numel();
    }
    return n ? static_cast<double>(zeros) / static_cast<double>(n) : 0.0;
}

TappedClassifier prune_weights(const TappedClassifier& model, double amount) {
    if (!(amount >= 0 && amount <= 1)) throw InvalidArgument("pruning amount must be in [0, 1]");
    auto m = clone_module(model);
    if (amount == 0) return m;
    torch::NoGradGuard ng;
    auto weights = m->prunable_weights();
    std::vector<torch::Tensor> flat;
    for (auto& w : weights) flat.push_back(w.detach().abs().flatten());
    const auto all = torch::cat(flat);
    const auto k = static_cast<int64_t>(std::llround(amount * static_cast<double>(all.numel())));
    const auto order = std::get<1>(torch::sort(all, /*stable=*/true, /*dim=*/0, /*descending=*/false));
    auto keep = torch::ones_like(all);
    keep.index_fill_(0, order.slice(0, 0, k), 0.0);
    int64_t offset = 0;
    for (auto& w : weights) {
        w.mul_(keep.slice(0, offset, offset + w.numel()).view_as(w));
        offset += w.numel();
    }
    return m;
}

TappedClassifier prune_filters(const TappedClassifier& model, double amount) {
    if (!(amount >= 0 && amount <= 1)) throw InvalidArgument("pruning amount must be in [0, 1]");
    auto m = clone_module(model);
    if (amount == 0) return m;
    torch::NoGradGuard ng;
    auto conv = m->last_conv();
    auto& w = conv->weight;
    const int64_t filters = w.size(0);
    const auto k = static_cast<int64_t>(std::llround(amount * static_cast<double>(filters)));
    const auto norms = w.detach().abs().flatten(1).sum(1);
    const auto order = std::get<1>(torch::sort(norms, true, 0, false));
    w.index_fill_(0, order.slice(0, 0, k), 0.0);
    if (conv->options.bias()) conv->bias.index_fill_(0, order.slice(0, 0, k), 0.0);
    return m;
}

PruneMode parse_prune_mode(const std::string& name) {
    if (name == "WP") return PruneMode::WP;
    if (name == "FP") return PruneMode::FP;
    throw InvalidArgument("unknown pruning mode '" + name + "' (WP, FP)");
}

AttackResult prune_attack(const TappedClassifier& model, PruneMode mode, double amount, const AttackEval& eval) {
    auto m = mode == PruneMode::WP ? prune_weights(model, amount) : prune_filters(model, amount);
    AttackResult r;
    r.attack = mode == PruneMode::WP ? "WP" : "FP";
    r.params = {{"amount", amount}};
    fill_eval(r, m, eval);
    return r;
}

TappedClassifier transfer_copy(const TappedClassifier& model, const Dataset& target_train, const TransferConfig& cfg) {
    if (target_train.size() == 0) throw InvalidArgument("transfer: empty target dataset");
    const auto& spec = model->spec();
    if (target_train.images.dim() != 4 || target_train.images.size(1) != spec.in_channels)
        throw InvalidArgument("transfer: target images do not match the model input");
    auto m = clone_module(model);
    m->reset_head(target_train.num_classes, derive_seed(cfg.seed, 41));
    for (auto& p : m->parameters()) p.set_requires_grad(false);
    for (auto& p : m->head()->parameters()) p.set_requires_grad(true);
    train_subset(m, target_train, m->head()->parameters(), true, cfg.epochs, cfg.lr, cfg.batch, derive_seed(cfg.seed, 42),
                 "transfer attack");
    for (auto& p : m->parameters()) p.set_requires_grad(true);
    return m;
}

AttackResult transfer_attack(const TappedClassifier& model, const Dataset& target_train, const Dataset& target_test,
                             const TransferConfig& cfg, double reference_accuracy) {
    auto m = transfer_copy(model, target_train, cfg);
    AttackResult r;
    r.attack = "transfer";
    r.params = {{"epochs", cfg.epochs}, {"lr", cfg.lr}, {"classes", target_train.num_classes}, {"seed", cfg.seed}};
    r.benign_accuracy = accuracy(m, target_test.images, target_test.labels);
    r.baseline_accuracy = reference_accuracy;
    return r;
}

namespace {

nn::Sequential gen_block(int in, int out) {
    return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)),
                          nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.01)), nn::BatchNorm2d(out));
}

}  // namespace

ReverseGeneratorImpl::ReverseGeneratorImpl(int hidden, int channels) : hidden_(hidden), channels_(channels) {
    if (hidden < 1 || channels < 1) throw InvalidArgument("generator sizes must be positive");
    reset();
}

void ReverseGeneratorImpl::reset() {
    features_ = register_module("features", gen_block(channels_, hidden_));
    dense1_ = register_module("dense1", gen_block(hidden_, hidden_));
    dense2_ = register_module("dense2", gen_block(2 * hidden_, hidden_));
    out_ = register_module("out", nn::Conv2d(nn::Conv2dOptions(3 * hidden_, channels_, 3).padding(1)));
    // Zero residual at start: the untrained generator is the identity map.
    torch::NoGradGuard ng;
    out_->weight.zero_();
    out_->bias.zero_();
}

torch::Tensor ReverseGeneratorImpl::forward(const torch::Tensor& x) {
    const auto a = features_->forward(x);
    const auto b = dense1_->forward(a);
    const auto c = dense2_->forward(torch::cat({a, b}, 1));
    return (x + out_->forward(torch::cat({a, b, c}, 1))).clamp(0.0, 1.0);
}

AttackResult reverse_engineer(const TappedClassifier& model, const Dataset& benign,
                              const std::optional<torch::Tensor>& authorized_pairs, const ReverseConfig& cfg,
                              const AttackEval& eval, ReverseGenerator* trained) {
    if (benign.size() == 0) throw InvalidArgument("reverse engineering: empty benign subset");
    if (authorized_pairs && (authorized_pairs->size(0) == 0 || authorized_pairs->sizes() != benign.images.sizes()))
        throw InvalidArgument("reverse engineering: authorized pairs must match the benign subset");
    auto victim = clone_module(model);
    victim->eval();
    for (auto& p : victim->parameters()) p.set_requires_grad(false);
    torch::manual_seed(derive_seed(cfg.seed, 51));
    ReverseGenerator g(cfg.hidden, static_cast<int>(benign.images.size(1)));
    torch::optim::Adam opt(g->parameters(), torch::optim::AdamOptions(cfg.lr));
    auto gen = make_generator(derive_seed(cfg.seed, 52));
    const int64_t n = benign.size();
    for (int s = 0; s < cfg.steps; ++s) {
        g->train();
        const auto idx = torch::randint(0, n, {std::min<int64_t>(cfg.batch, n)}, gen,
                                        torch::TensorOptions().dtype(torch::kInt64));
        const auto x = benign.images.index_select(0, idx);
        const auto out = g->forward(x);
        auto loss = F::cross_entropy(victim->forward(out), benign.labels.index_select(0, idx));
        if (authorized_pairs) loss = loss + cfg.lambda_mse * F::mse_loss(out, authorized_pairs->index_select(0, idx));
        require_finite(loss, s + 1, "reverse-engineering generator");
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    g->eval();
    torch::Tensor generated;
    {
        torch::NoGradGuard ng;
        std::vector<torch::Tensor> parts;
        for (int64_t b = 0; b < eval.benign.size(); b += 256)
            parts.push_back(g->forward(eval.benign.images.slice(0, b, std::min<int64_t>(b + 256, eval.benign.size()))));
        generated = torch::cat(parts);
    }
    AttackResult r;
    r.attack = authorized_pairs ? "reverse_a2" : "reverse_a1";
    r.params = {{"steps", cfg.steps}, {"lr", cfg.lr}, {"samples", n}, {"seed", cfg.seed}};
    if (authorized_pairs) r.params["lambda_mse"] = cfg.lambda_mse;
    r.benign_accuracy = accuracy(victim, generated, eval.benign.labels);
    r.authorized_accuracy = eval.authorized.defined() ? accuracy(victim, eval.authorized, eval.benign.labels) : 0.0;
    r.baseline_accuracy = eval.baseline_accuracy;
    if (trained) *trained = g;
    return r;
}

void write_prune_svg(const std::filesystem::path& path, const std::vector<AttackResult>& rows, const std::string& title) {
    const double W = 480, H = 320, L = 50, R = 20, T = 30, B = 40;
    auto X = [&](double a) { return L + a * (W - L - R); };
    auto Y = [&](double acc) { return H - B - acc / 100.0 * (H - T - B); };
    std::ofstream os(path);
    if (!os) throw InvalidArgument("cannot write " + path.string());
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n"
       << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 100; t += 20)
        os << "<text x=\"" << L - 6 << "\" y=\"" << Y(t) + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << t << "</text>\n";
    for (int t = 0; t <= 100; t += 20)
        os << "<text x=\"" << X(t / 100.0) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\" font-size=\"10\">" << t
           << "%</text>\n";
    auto line = [&](bool authorized, const char* colour, const char* label, double ly) {
        os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
        for (const auto& r : rows)
            os << X(r.params.value("amount", 0.0)) << ',' << Y(authorized ? r.authorized_accuracy : r.benign_accuracy) << ' ';
        os << "\"/>\n<text x=\"" << W - R - 90 << "\" y=\"" << ly << "\" font-size=\"11\" fill=\"" << colour << "\">"
           << label << "</text>\n";
    };
    line(true, "#1f77b4", "authorized", T + 12);
    line(false, "#d62728", "benign", T + 26);
    os << "</svg>\n";
}

}  // namespace keyauth
