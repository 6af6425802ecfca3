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

#include "keyauth/experts.hpp"

#include "keyauth/checkpoint.hpp"
#include "keyauth/error.hpp"

namespace keyauth {

namespace F = torch::nn::functional;

namespace {

using BatchImages = std::function<torch::Tensor(const torch::Tensor& idx)>;

template <typename Opt>
void sgd_epochs(TappedClassifier& model, const Dataset& data, int epochs, int batch, Opt& opt,
                const AugmentPolicy& policy, torch::Generator& gen, const std::function<double(long)>& lr_at,
                const MetricsSink& sink, const std::string& what, const BatchImages& images_for = {}) {
    long step = 0;
    for (int e = 0; e < epochs; ++e) {
        model->train();
        double total = 0.0;
        long count = 0;
        for (const auto& idx : shuffled_batches(data.size(), batch, gen)) {
            if (lr_at) set_learning_rate(opt, lr_at(step));
            const auto x = images_for ? images_for(idx) : augment(data.images.index_select(0, idx), policy, gen);
            const auto loss = F::cross_entropy(model->forward(x), data.labels.index_select(0, idx));
            ++step;
            require_finite(loss, step, what);
            opt.zero_grad();
            loss.backward();
            opt.step();
            total += loss.item<double>();
            ++count;
        }
        if (sink) sink(e, {{"loss", count ? total / count : 0.0}});
    }
}

}  // namespace

TappedClassifier train_baseline(const Dataset& train, const ClassifierSpec& spec, const BaselineConfig& cfg,
                                const MetricsSink& sink) {
    if (train.size() == 0) throw InvalidArgument("train_baseline: empty dataset");
    if (train.num_classes != spec.num_classes) throw InvalidArgument("train_baseline: class count mismatch");
    auto model = make_classifier(spec, cfg.seed);
    auto gen = make_generator(derive_seed(cfg.seed, 11));
    torch::optim::SGD opt(model->parameters(),
                          torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
    const long steps = static_cast<long>(cfg.epochs) * ((train.size() + cfg.batch - 1) / cfg.batch);
    WarmupCosine sched(cfg.lr, steps, 0.3);
    sgd_epochs(model, train, cfg.epochs, cfg.batch, opt, cfg.augment, gen, [&](long s) { return sched.at(s); }, sink,
               "baseline training");
    model->eval();
    return model;
}

TappedClassifier finetune_real(const TappedClassifier& base, DomainTriple& triple, const RealConfig& cfg,
                               const MetricsSink& sink) {
    if (triple.size() == 0) throw InvalidArgument("finetune_real: empty dataset");
    auto model = clone_module(base);
    auto gen = make_generator(derive_seed(cfg.seed, 12));
    torch::optim::SGD opt(model->parameters(),
                          torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
    // Flips and crops apply to the cover before encoding.
    sgd_epochs(model, triple.benign(), cfg.epochs, cfg.batch, opt, cfg.augment, gen, {}, sink, "real expert fine-tuning",
               [&](const torch::Tensor& idx) { return triple.images_augmented(Domain::authorized, idx, cfg.augment, gen); });
    model->eval();
    return model;
}

TappedClassifier finetune_real(const TappedClassifier& base, const Dataset& data, Domain tag, const RealConfig& cfg,
                               const MetricsSink& sink) {
    if (tag != Domain::authorized) throw InvalidArgument("real expert fine-tunes on authorized images only");
    if (data.size() == 0) throw InvalidArgument("finetune_real: empty dataset");
    auto model = clone_module(base);
    auto gen = make_generator(derive_seed(cfg.seed, 12));
    torch::optim::SGD opt(model->parameters(),
                          torch::optim::SGDOptions(cfg.lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));
    sgd_epochs(model, data, cfg.epochs, cfg.batch, opt, cfg.augment, gen, {}, sink, "real expert fine-tuning");
    model->eval();
    return model;
}

TappedClassifier train_fake(TappedClassifier& real, Domain pair_domain, DomainTriple& triple, const FakeConfig& cfg,
                            const MetricsSink& sink) {
    if (pair_domain == Domain::authorized) throw InvalidArgument("fake experts pair with benign or noise images");
    cfg.layers.validate();
    auto fake = make_classifier(real->spec(), cfg.seed);
    if (cfg.iters == 0) return fake;
    auto gen = make_generator(derive_seed(cfg.seed, 13));
    real->eval();

    std::vector<AuxFitter> fitters;
    {
        // Probe once for the tap widths.
        torch::NoGradGuard ng;
        const auto taps = real->forward_tapped(triple.benign().images.slice(0, 0, 2), cfg.layers).taps;
        if (taps.size() != cfg.layers.size()) throw InvalidArgument("missing tap for a selected layer");
        for (std::size_t l = 0; l < taps.size(); ++l)
            fitters.emplace_back(make_aux(static_cast<int>(taps[l].size(1)), derive_seed(cfg.seed, 100 + l)),
                                 cfg.aux_lr);
    }
    torch::optim::Adam opt(fake->parameters(), torch::optim::AdamOptions(cfg.lr));
    std::unique_ptr<MiCsvLog> log;
    if (!cfg.mi_log.empty()) log = std::make_unique<MiCsvLog>(cfg.mi_log);

    const int64_t n = triple.size();
    for (int it = 0; it < cfg.iters; ++it) {
        const auto idx = torch::randint(0, n, {std::min<int64_t>(cfg.batch, n)}, gen,
                                        torch::TensorOptions().dtype(torch::kInt64));
        std::vector<torch::Tensor> zr;
        {
            torch::NoGradGuard ng;
            for (auto& t : real->forward_tapped(triple.images(Domain::authorized, idx), cfg.layers).taps)
                zr.push_back(pool_features(t));
        }
        fake->train();
        std::vector<torch::Tensor> zf;
        for (auto& t : fake->forward_tapped(triple.images(pair_domain, idx), cfg.layers).taps)
            zf.push_back(pool_features(t));
        std::vector<double> values;
        torch::Tensor total = torch::zeros({});
        for (std::size_t l = 0; l < zr.size(); ++l) {
            fitters[l].fit(zr[l], zf[l], cfg.aux_steps);
            const auto mi = club_mi(fitters[l].estimator(), zr[l], zf[l]);
            values.push_back(mi.item<double>());
            total = total + mi;
        }
        require_finite(total, it + 1, "fake expert training");
        opt.zero_grad();
        total.backward();
        opt.step();
        if (log && (it % cfg.log_every == 0 || it + 1 == cfg.iters)) log->append(it, cfg.layers, values);
        if (sink && (it % cfg.log_every == 0 || it + 1 == cfg.iters)) {
            std::vector<std::pair<std::string, double>> m{{"mi_total", total.item<double>()}};
            for (std::size_t l = 0; l < values.size(); ++l)
                m.emplace_back("mi_layer" + std::to_string(cfg.layers.layers[l]), values[l]);
            sink(it, m);
        }
    }
    fake->eval();
    return fake;
}

TappedClassifier& ExpertEnsemble::expert(Domain tag) {
    switch (tag) {
        case Domain::authorized: return real;
        case Domain::benign: return fake_benign;
        case Domain::noise: return fake_noise;
    }
    throw InvalidArgument("unknown domain tag");
}

void ExpertEnsemble::eval() {
    real->eval();
    fake_benign->eval();
    fake_noise->eval();
}

ClassifierOutput moe_forward(ExpertEnsemble& ens, const torch::Tensor& x, Domain tag, const LayerSelection& sel) {
    const int t = static_cast<int>(tag);
    if (t < 0 || t > 2) throw InvalidArgument("unknown domain tag");
    return ens.expert(tag)->forward_tapped(x, sel);
}

ClassifierOutput moe_forward(ExpertEnsemble& ens, const torch::Tensor& x, const torch::Tensor& tags,
                             const LayerSelection& sel) {
    if (tags.dim() != 1 || tags.size(0) != x.size(0)) throw InvalidArgument("moe_forward: one tag per sample");
    const auto t = tags.to(torch::kInt64);
    if (t.numel() > 0 && (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() > 2))
        throw InvalidArgument("unknown domain tag");
    ClassifierOutput out;
    for (int d = 0; d < 3; ++d) {
        const auto sel_idx = t.eq(d).nonzero().squeeze(1);
        if (sel_idx.numel() == 0) continue;
        auto part = ens.expert(static_cast<Domain>(d))->forward_tapped(x.index_select(0, sel_idx), sel);
        if (!out.logits.defined()) {
            out.logits = torch::zeros({x.size(0), part.logits.size(1)}, part.logits.options());
            for (auto& f : part.taps) {
                auto shape = f.sizes().vec();
                shape[0] = x.size(0);
                out.taps.push_back(torch::zeros(shape, f.options()));
            }
        }
        out.logits = out.logits.index_copy(0, sel_idx, part.logits);
        for (std::size_t l = 0; l < part.taps.size(); ++l)
            out.taps[l] = out.taps[l].index_copy(0, sel_idx, part.taps[l]);
    }
    return out;
}

Checkpoint classifier_checkpoint(const TappedClassifier& model, const nlohmann::json& extra) {
    Checkpoint ck;
    ck.meta = {{"kind", "classifier"}, {"spec", model->spec().to_json()}};
    if (!extra.is_null()) ck.meta["extra"] = extra;
    ck.add_section("model", module_state(*model));
    return ck;
}

TappedClassifier classifier_from_checkpoint(const Checkpoint& ck) {
    if (!ck.meta.contains("spec")) throw FormatError("checkpoint has no classifier spec");
    TappedClassifier m(ClassifierSpec::from_json(ck.meta.at("spec")));
    load_module_state(*m, ck.section("model"));
    m->eval();
    return m;
}

void save_classifier(const std::filesystem::path& path, const TappedClassifier& model, const nlohmann::json& extra) {
    save_checkpoint(path, classifier_checkpoint(model, extra));
}

TappedClassifier load_classifier(const std::filesystem::path& path) {
    return classifier_from_checkpoint(load_checkpoint(path));
}

void save_ensemble(const std::filesystem::path& path, const ExpertEnsemble& ens, const nlohmann::json& extra) {
    Checkpoint ck;
    ck.meta = {{"kind", "ensemble"}, {"spec", ens.real->spec().to_json()}, {"key_fingerprint", ens.key_fingerprint}};
    if (!extra.is_null()) ck.meta["extra"] = extra;
    ck.add_section("real", module_state(*ens.real));
    ck.add_section("fake_benign", module_state(*ens.fake_benign));
    ck.add_section("fake_noise", module_state(*ens.fake_noise));
    save_checkpoint(path, ck);
}

ExpertEnsemble load_ensemble(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    if (ck.meta.value("kind", "") != "ensemble") throw FormatError(path.string() + ": not an expert ensemble");
    const auto spec = ClassifierSpec::from_json(ck.meta.at("spec"));
    ExpertEnsemble ens;
    ens.key_fingerprint = ck.meta.value("key_fingerprint", "");
    for (auto [name, slot] : {std::pair{"real", &ens.real}, {"fake_benign", &ens.fake_benign},
                              {"fake_noise", &ens.fake_noise}}) {
        *slot = TappedClassifier(spec);
        load_module_state(**slot, ck.section(name));
        (*slot)->eval();
    }
    return ens;
}

}  // namespace keyauth
