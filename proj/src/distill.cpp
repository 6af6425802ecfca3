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

#include "keyauth/distill.hpp"

#include <cmath>

#include "keyauth/checkpoint.hpp"
#include "keyauth/error.hpp"

namespace keyauth {

namespace F = torch::nn::functional;
namespace nn = torch::nn;

void DistillConfig::validate() const {
    if (lambda_at < 0 || lambda_crd < 0) throw InvalidArgument("distill: loss weights must be non-negative");
    if (!(alpha > 1)) throw InvalidArgument("distill: attention exponent must exceed 1");
    if (!(temperature > 0)) throw InvalidArgument("distill: temperature must be positive");
    if (negatives < 1) throw InvalidArgument("distill: need at least one negative per positive");
    if (epochs < 0 || batch < 2 || lr <= 0 || projection < 1) throw InvalidArgument("distill: bad schedule");
    validate_policy(augment);
    layers.validate();
}

nlohmann::json DistillConfig::to_json() const {
    return {{"lambda_at", lambda_at}, {"lambda_crd", lambda_crd}, {"alpha", alpha},     {"temperature", temperature},
            {"negatives", negatives}, {"epochs", epochs},         {"batch", batch},     {"lr", lr},
            {"projection", projection}, {"augment", augment},     {"layers", layers.layers}, {"seed", seed}};
}

DistillConfig DistillConfig::from_json(const nlohmann::json& j) {
    DistillConfig c;
    c.lambda_at = j.at("lambda_at").get<double>();
    c.lambda_crd = j.at("lambda_crd").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.temperature = j.at("temperature").get<double>();
    c.negatives = j.at("negatives").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.batch = j.at("batch").get<int>();
    c.lr = j.at("lr").get<double>();
    c.projection = j.at("projection").get<int>();
    c.augment = j.at("augment").get<AugmentPolicy>();
    c.layers.layers = j.at("layers").get<std::vector<int>>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

torch::Tensor kl_loss(const torch::Tensor& student_logits, const torch::Tensor& teacher_logits, double tau) {
    if (student_logits.sizes() != teacher_logits.sizes()) throw InvalidArgument("kl_loss: logit shapes differ");
    if (!(tau > 0)) throw InvalidArgument("kl_loss: temperature must be positive");
    if (!torch::isfinite(student_logits).all().item<bool>() || !torch::isfinite(teacher_logits).all().item<bool>())
        throw InvalidArgument("kl_loss: non-finite logits");
    const auto s = student_logits.dim() == 1 ? student_logits.unsqueeze(0) : student_logits;
    const auto t = teacher_logits.dim() == 1 ? teacher_logits.unsqueeze(0) : teacher_logits;
    const auto log_p = torch::log_softmax(t / tau, 1);
    const auto log_q = torch::log_softmax(s / tau, 1);
    return (log_p.exp() * (log_p - log_q)).sum(1).mean();
}

torch::Tensor attention_map(const torch::Tensor& f, double alpha) {
    if (!(alpha > 1)) throw InvalidArgument("attention_map: alpha must exceed 1");
    if (f.dim() != 3 && f.dim() != 4) throw InvalidArgument("attention_map: expected [C,H,W] or [N,C,H,W]");
    const auto mag = f.abs();
    return (alpha == 2.0 ? mag * mag : mag.pow(alpha)).sum(f.dim() - 3);
}

torch::Tensor at_loss(const torch::Tensor& teacher_f, const torch::Tensor& student_f, double alpha) {
    const auto t = teacher_f.dim() == 3 ? teacher_f.unsqueeze(0) : teacher_f;
    const auto s = student_f.dim() == 3 ? student_f.unsqueeze(0) : student_f;
    if (t.dim() != 4 || s.dim() != 4 || t.size(0) != s.size(0) || t.size(2) != s.size(2) || t.size(3) != s.size(3))
        throw InvalidArgument("at_loss: batch and spatial sizes must match");
    auto unit = [&](const torch::Tensor& f) {
        const auto a = attention_map(f, alpha).flatten(1);
        return a / (a.norm(2, 1, true) + 1e-8);
    };
    return (unit(t) - unit(s)).norm(2, 1).mean();
}

torch::Tensor at_loss(const std::vector<torch::Tensor>& teacher_f, const std::vector<torch::Tensor>& student_f,
                      double alpha) {
    if (teacher_f.size() != student_f.size() || teacher_f.empty())
        throw InvalidArgument("at_loss: need matching non-empty layer lists");
    auto total = at_loss(teacher_f[0], student_f[0], alpha);
    for (std::size_t l = 1; l < teacher_f.size(); ++l) total = total + at_loss(teacher_f[l], student_f[l], alpha);
    return total;
}

CrdCriticImpl::CrdCriticImpl(int teacher_dim, int student_dim, int projection)
    : teacher_dim_(teacher_dim), student_dim_(student_dim), projection_(projection) {
    if (teacher_dim < 1 || student_dim < 1 || projection < 1) throw InvalidArgument("critic sizes must be positive");
    reset();
}

void CrdCriticImpl::reset() {
    proj_t_ = register_module("proj_t", nn::Linear(teacher_dim_, projection_));
    proj_s_ = register_module("proj_s", nn::Linear(student_dim_, projection_));
    score_ = register_module("score", nn::Bilinear(projection_, projection_, 1));
}

torch::Tensor CrdCriticImpl::forward(const torch::Tensor& teacher, const torch::Tensor& student) {
    const auto et = F::normalize(proj_t_->forward(teacher), F::NormalizeFuncOptions().dim(1));
    const auto es = F::normalize(proj_s_->forward(student), F::NormalizeFuncOptions().dim(1));
    return torch::sigmoid(score_->forward(et, es)).squeeze(1).clamp(kEps, 1.0 - kEps);
}

torch::Tensor crd_loss(const std::vector<torch::Tensor>& teacher_f, const std::vector<torch::Tensor>& student_f,
                       const torch::Tensor& tags, std::vector<CrdCritic>& critics, int negatives,
                       torch::Generator& gen) {
    if (teacher_f.size() != student_f.size() || teacher_f.size() != critics.size() || teacher_f.empty())
        throw InvalidArgument("crd_loss: need one critic per layer");
    if (negatives < 1) throw InvalidArgument("crd_loss: need at least one negative");
    const auto t = tags.to(torch::kInt64).contiguous();
    const int64_t n = t.numel();
    if (n == 0 || t.eq(t[0]).all().item<bool>())
        throw InvalidArgument("crd_loss: batch holds a single domain, no negatives available");

    // Negative indices: for sample i, uniform draws among samples with another tag.
    auto neg = torch::empty({n, negatives}, torch::kInt64);
    {
        const auto* tp = t.data_ptr<int64_t>();
        const auto u = torch::rand({n, negatives}, gen);
        const auto* up = u.data_ptr<float>();
        auto* np = neg.data_ptr<int64_t>();
        std::vector<int64_t> others;
        for (int64_t i = 0; i < n; ++i) {
            others.clear();
            for (int64_t j = 0; j < n; ++j)
                if (tp[j] != tp[i]) others.push_back(j);
            for (int k = 0; k < negatives; ++k) {
                auto pick = static_cast<std::size_t>(up[i * negatives + k] * static_cast<float>(others.size()));
                np[i * negatives + k] = others[std::min(pick, others.size() - 1)];
            }
        }
    }
    const auto neg_flat = neg.flatten();
    const auto anchor = torch::arange(n, torch::kInt64).repeat_interleave(negatives);

    torch::Tensor total = torch::zeros({});
    for (std::size_t l = 0; l < critics.size(); ++l) {
        const auto tv = pool_features(teacher_f[l]);
        const auto sv = pool_features(student_f[l]);
        const auto h_pos = critics[l]->forward(tv, sv);
        const auto h_neg = critics[l]->forward(tv.index_select(0, neg_flat), sv.index_select(0, anchor));
        total = total - torch::log(h_pos).mean() - negatives * torch::log1p(-h_neg).mean();
    }
    return total;
}

void save_protected(const std::filesystem::path& path, const ProtectedModel& pm, const nlohmann::json& extra) {
    Checkpoint ck = classifier_checkpoint(pm.model, extra);
    ck.meta["kind"] = "protected";
    ck.meta["user_id"] = pm.user_id;
    ck.meta["key_fingerprint"] = pm.key_fingerprint;
    ck.meta["config"] = pm.config;
    save_checkpoint(path, ck);
}

ProtectedModel load_protected(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    if (ck.meta.value("kind", "") != "protected") throw FormatError(path.string() + ": not a protected model");
    return {classifier_from_checkpoint(ck), ck.meta.value("user_id", ""), ck.meta.value("key_fingerprint", ""),
            ck.meta.value("config", nlohmann::json::object())};
}

ProtectedModel distill_student(ExpertEnsemble& ens, DomainTriple& triple, const DistillConfig& cfg,
                               const MetricsSink& sink) {
    cfg.validate();
    const auto& spec = ens.real->spec();
    auto student = make_classifier(spec, cfg.seed);
    const bool use_at = cfg.lambda_at > 0, use_crd = cfg.lambda_crd > 0;
    std::vector<CrdCritic> critics;
    std::vector<torch::Tensor> params = student->parameters();
    if (use_crd) {
        torch::manual_seed(derive_seed(cfg.seed, 21));
        for (int l : cfg.layers.layers) {
            const int w = spec.widths[static_cast<std::size_t>(l)];
            critics.emplace_back(w, w, cfg.projection);
            for (auto& p : critics.back()->parameters()) params.push_back(p);
        }
    }
    torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.lr));
    auto gen = make_generator(derive_seed(cfg.seed, 22));
    ens.eval();

    const int64_t n = triple.mixed_size();
    const long steps = static_cast<long>(cfg.epochs) * ((n + cfg.batch - 1) / cfg.batch);
    WarmupCosine sched(cfg.lr, steps, 0.3);
    long step = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        student->train();
        double sum_kl = 0, sum_at = 0, sum_crd = 0;
        long count = 0;
        for (const auto& idx : shuffled_batches(n, cfg.batch, gen)) {
            set_learning_rate(opt, sched.at(step));
            auto batch = triple.mixed_augmented(idx, cfg.augment, gen);
            const auto& x = batch.images;
            ClassifierOutput teacher;
            {
                torch::NoGradGuard ng;
                teacher = moe_forward(ens, x, batch.tags, cfg.layers);
            }
            const auto out = student->forward_tapped(x, cfg.layers);
            auto loss = kl_loss(out.logits, teacher.logits, cfg.temperature);
            sum_kl += loss.item<double>();
            if (use_at) {
                const auto la = at_loss(teacher.taps, out.taps, cfg.alpha);
                sum_at += la.item<double>();
                loss = loss + cfg.lambda_at * la;
            }
            if (use_crd && !batch.tags.eq(batch.tags[0]).all().item<bool>()) {
                const auto lc = crd_loss(teacher.taps, out.taps, batch.tags, critics, cfg.negatives, gen);
                sum_crd += lc.item<double>();
                loss = loss + cfg.lambda_crd * lc;
            }
            ++step;
            require_finite(loss, step, "distillation");
            opt.zero_grad();
            loss.backward();
            opt.step();
            ++count;
        }
        if (sink)
            sink(e, {{"kl", sum_kl / std::max(1L, count)},
                     {"at", sum_at / std::max(1L, count)},
                     {"crd", sum_crd / std::max(1L, count)}});
    }
    student->eval();
    ProtectedModel pm;
    pm.model = student;
    pm.user_id = triple.owner_key().user_id;
    pm.key_fingerprint = key_fingerprint(triple.owner_key());
    pm.config = cfg.to_json();
    return pm;
}

}  // namespace keyauth
