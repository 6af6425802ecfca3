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

// Acceptance run: one PASS/FAIL line per criterion. Trained artifacts are
// cached in a run directory so repeated invocations only re-evaluate.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "keyauth/attacks.hpp"
#include "keyauth/checkpoint.hpp"
#include "keyauth/config.hpp"
#include "keyauth/distill.hpp"
#include "keyauth/error.hpp"
#include "keyauth/key_codec.hpp"
#include "keyauth/mi_club.hpp"
#include "keyauth/pipeline.hpp"
#include "keyauth/training.hpp"
#include "keyauth/verify.hpp"

using namespace keyauth;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << detail << std::endl;
    if (!pass) ++failures;
}

std::string fmt(double v, int prec = 2) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(prec);
    os << v;
    return os.str();
}

bool cached(const RunDir& run, const fs::path& p) {
    if (!fs::exists(p)) return false;
    try {
        run.require(p, "cache");
        return true;
    } catch (const PreconditionError&) {
        return false;
    }
}

// ---- criteria that need no trained artifacts ----------------------------

void club_oracle() {
    bool ok = true;
    std::string detail;
    for (double rho : {0.0, 0.5, 0.8}) {
        auto gen = make_generator(100 + static_cast<std::uint64_t>(rho * 10));
        const auto z = torch::randn({2048, 1}, gen);
        const auto zh = rho * z + std::sqrt(1 - rho * rho) * torch::randn({2048, 1}, gen);
        auto est = fit_aux(make_aux(1, 11), z, zh, 1500, 1e-2);
        const double mi = estimate_mi(est, z, zh);
        const double truth = -0.5 * std::log(1 - rho * rho);
        ok = ok && (mi >= truth - 0.1);
        detail += "rho=" + fmt(rho, 1) + " est=" + fmt(mi, 3) + " true=" + fmt(truth, 3) + "; ";
    }
    auto est = make_aux(1, 12);
    const double single = estimate_mi(est, torch::randn({1, 1}), torch::randn({1, 1}));
    ok = ok && single == 0.0;
    report(4, ok, detail + "N=1 gives " + fmt(single, 1));
}

void vote_brute_force() {
    std::mt19937_64 rng(2024);
    int mismatches = 0;
    for (int t = 0; t < 1000; ++t) {
        const int r = 1 + static_cast<int>(rng() % 4);
        const int c = 1 + static_cast<int>(rng() % 3);
        const int nb = 1 + static_cast<int>(rng() % 3);  // blocks per side
        Plane plane(c, nb * r, nb * r);
        for (auto& v : plane.values) v = std::uniform_real_distribution<float>(0.f, 1.f)(rng);
        const auto blocks = split_blocks(plane, r);
        const auto voted = majority_vote(blocks);
        // Exhaustive count over every block position.
        UserKey expect{"", c, r, std::vector<std::uint8_t>(static_cast<std::size_t>(c) * r * r)};
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < r; ++j) {
                    int ones = 0;
                    for (int bi = 0; bi < nb; ++bi)
                        for (int bj = 0; bj < nb; ++bj) ones += plane.at(ch, bi * r + i, bj * r + j) >= 0.5f;
                    expect.bits[(static_cast<std::size_t>(ch) * r + i) * r + j] = 2 * ones >= nb * nb;
                }
        if (!voted.same_bits(expect)) ++mismatches;
        UserKey other = expect;
        int flips = 0;
        for (auto& b : other.bits)
            if (rng() % 2) b ^= 1, ++flips;
        if (hamming_distance(expect, other) != flips) ++mismatches;
    }
    report(5, mismatches == 0, std::to_string(mismatches) + " mismatches in 1000 instances");
}

void distill_losses() {
    std::vector<std::string> bad;
    auto near = [&](const std::string& what, double got, double want, double rel) {
        if (std::abs(got - want) > rel * std::max(1.0, std::abs(want))) bad.push_back(what + "=" + fmt(got, 8));
    };
    const auto l = torch::tensor({{10.0, 0.0, 0.0}}, torch::kDouble);
    near("kl_identical", kl_loss(l, l, 4).item<double>(), 0.0, 1e-6);
    {
        // Uniform student against a peaked teacher, evaluated by hand.
        const auto p = torch::softmax(l / 4, 1);
        double want = 0;
        for (int k = 0; k < 3; ++k) {
            const double pk = p[0][k].item<double>();
            want += pk * std::log(pk * 3);
        }
        near("kl_uniform", kl_loss(torch::zeros({1, 3}, torch::kDouble), l, 4).item<double>(), want, 1e-6);
    }
    const auto a = torch::rand({2, 4, 3, 3});
    near("at_identical", at_loss(a, a).item<double>(), 0.0, 1e-6);
    near("at_scaled", at_loss(a, 3 * a).item<double>(), 0.0, 1e-6);
    auto t = torch::zeros({1, 1, 2, 2}), s = torch::zeros({1, 1, 2, 2});
    t[0][0][0][0] = 1;
    s[0][0][1][1] = 1;
    near("at_orthogonal", at_loss(t, s).item<double>(), std::sqrt(2.0), 1e-6);

    // Constant-1/2 critic on four layers.
    const int negatives = 4;
    std::vector<torch::Tensor> ft, fs;
    std::vector<CrdCritic> critics;
    for (int d : {16, 32, 64, 128}) {
        ft.push_back(torch::rand({12, d, 2, 2}));
        fs.push_back(torch::rand({12, d, 2, 2}));
        critics.emplace_back(d, d, 8);
        torch::NoGradGuard ng;
        for (auto& p : critics.back()->score()->parameters()) p.zero_();
    }
    const auto tags = torch::arange(12) % 3;
    auto gen = make_generator(3);
    const double crd = crd_loss(ft, fs, tags, critics, negatives, gen).item<double>();
    near("crd_const", crd, (1 + negatives) * 4 * std::log(2.0), 1e-6);
    report(6, bad.empty(), bad.empty() ? "kl/at/crd examples and closed form within 1e-6 relative" : [&] {
        std::string s;
        for (const auto& b : bad) s += b + " ";
        return s;
    }());
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    fs::path cache = KEYAUTH_ACCEPT_DIR;
    fs::path config_path = fs::path(KEYAUTH_SOURCE_DIR) / "configs" / "desk.ini";
    for (int i = 1; i + 1 < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--cache") cache = argv[++i];
        else if (a == "--config") config_path = argv[++i];
    }
    try {
        club_oracle();
        vote_brute_force();
        distill_losses();

        const auto cfg = load_config(config_path);
        const auto data = load_run_data(cfg);
        RunDir run(cache, cfg);
        std::cerr << "run directory " << run.root() << " (config hash " << run.config_hash() << ")\n";

        auto codec = cached(run, run.codec_path()) ? load_run_codec(run) : stage_train_codec(run, data);
        double base_acc = 0;
        auto baseline = cached(run, run.baseline_path()) ? load_run_baseline(run, &base_acc) : [&] {
            stage_train_baseline(run, data);
            return load_run_baseline(run, &base_acc);
        }();
        const std::vector<std::string> users{"user1", "user2", "user3"};
        auto prot = stage_protect(run, data, users);
        auto simple = stage_protect(run, data, {users[0]}, true);
        const auto registry = load_run_registry(run);

        // Second innocent model: same recipe, different seed.
        const auto alt_path = run.root() / "baseline" / "alt_seed.ckpt";
        TappedClassifier alt{nullptr};
        if (cached(run, alt_path)) {
            alt = classifier_from_checkpoint(load_checkpoint(alt_path));
        } else {
            auto bc = cfg.baseline;
            bc.seed = derive_seed(cfg.seed, 9100);
            alt = train_baseline(data.train, cfg.classifier, bc);
            save_classifier(alt_path, alt, {{"config_hash", run.config_hash()}});
        }

        const auto& test = data.test;
        const auto key1 = user_key(cfg, users[0]);

        // 1. Codec round trip on held-out encoded images.
        {
            const auto stego = encode(codec, data.codec_test.images, expand_key(key1, cfg.data.image_size, cfg.data.image_size));
            const auto keys = extract_keys(codec, stego);
            long ok = 0;
            for (const auto& k : keys) ok += hamming_distance(k, key1) <= 1;
            const double rate = static_cast<double>(ok) / static_cast<double>(keys.size());
            report(1, keys.size() >= 500 && rate >= 0.95,
                   fmt(100 * rate) + "% of " + std::to_string(keys.size()) + " held-out images within HD 1 (need >= 95%)");
        }

        // 2. Fidelity, effectiveness, uniqueness for every protected model.
        bool c2 = true;
        std::string d2 = "baseline " + fmt(base_acc) + ";";
        for (const auto& o : prot) {
            const auto& t = o.triple;
            const bool ok = t.authorized >= base_acc - 5 && t.benign <= 25 && t.noise <= 25;
            c2 = c2 && ok;
            d2 += " " + o.user_id + " A/B/N " + fmt(t.authorized) + "/" + fmt(t.benign) + "/" + fmt(t.noise);
        }
        report(2, c2, d2 + " (need A >= baseline-5, B <= 25, N <= 25)");

        // 3. Key confusion matrix.
        {
            const auto conf = stage_confusion(run, data);
            double worst_off = 0;
            for (std::size_t i = 0; i < users.size(); ++i)
                for (std::size_t j = 0; j < users.size(); ++j)
                    if (i != j) worst_off = std::max(worst_off, conf["accuracy"][i][j].get<double>());
            report(3, worst_off <= 30 && c2,
                   "max off-diagonal " + fmt(worst_off) + " (need <= 30), diagonal " + (c2 ? "meets" : "misses") +
                       " criterion 2");
        }

        // 7. FTAL with 30% data on the simple-distilled versus protected student.
        {
            auto ft = cfg.finetune;
            ft.strategy = FineTuneStrategy::FTAL;
            ft.data_fraction = 0.3;
            AttackEval eval{test, encode(codec, test.images, expand_key(key1, cfg.data.image_size, cfg.data.image_size)),
                            base_acc};
            const auto rp = finetune_attack(prot[0].model.model, data.train, ft, eval);
            const auto rs = finetune_attack(simple[0].model.model, data.train, ft, eval);
            // Same attack from random weights: the most a total lock could force.
            const auto rf = finetune_attack(make_classifier(cfg.classifier, derive_seed(cfg.seed, 9200)), data.train, ft, eval);
            const double gap = rs.benign_accuracy - rp.benign_accuracy;
            report(7, gap >= 10,
                   "benign accuracy after FTAL: simple " + fmt(rs.benign_accuracy) + ", protected " +
                       fmt(rp.benign_accuracy) + ", gap " + fmt(gap) + " (need >= 10); from random init " +
                       fmt(rf.benign_accuracy));
        }

        // 8. Black-box verification of four suspects and tracing.
        {
            const auto queries = test.slice(0, std::min<int64_t>(cfg.query_size, test.size()));
            std::vector<SuspectOutcome> outcomes;
            std::vector<std::pair<std::string, TappedClassifier>> suspects{
                {"", baseline}, {"", alt}, {users[0], prot[0].model.model}, {users[1], prot[1].model.model}};
            std::string verdicts;
            for (auto& [culprit, model] : suspects) {
                ModelEndpoint ep(model);
                SuspectOutcome s;
                if (!culprit.empty()) s.true_culprit = culprit;
                s.report = blackbox_verify(ep, queries, codec, registry, cfg.verify, base_acc);
                verdicts += verdict_name(s.report.verdict) + (s.report.matched_user ? "(" + *s.report.matched_user + ")" : "") + " ";
                outcomes.push_back(std::move(s));
            }
            const double ta = tracing_accuracy(outcomes);
            const auto intercepted =
                encode(codec, test.images.slice(0, 0, 200), expand_key(key1, cfg.data.image_size, cfg.data.image_size));
            const auto tr = trace_intercepted(intercepted, codec, registry, 1);
            double tsr = 0;
            for (std::size_t i = 0; i < tr.user_ids.size(); ++i)
                if (tr.user_ids[i] == users[0]) tsr = tr.tsr[i];
            report(8, ta == 100.0 && tsr >= 0.95,
                   "TA " + fmt(ta) + "% [" + verdicts + "], TSR " + fmt(tsr, 3) + " on " +
                       std::to_string(intercepted.size(0)) + " intercepted images (need TA 100, TSR >= 0.95)");
        }

        // 9. Attack harness sanity.
        {
            auto& m = prot[0].model.model;
            m->eval();
            torch::NoGradGuard ng;
            const auto x = test.images.slice(0, 0, 64);
            const auto ref = m->forward(x);
            auto wp0 = prune_weights(m, 0.0);
            wp0->eval();
            const bool wp_same = torch::equal(wp0->forward(x), ref);
            auto ft = cfg.finetune;
            ft.epochs = 0;
            auto ft0 = finetune_copy(m, data.train, ft);
            ft0->eval();
            const bool ft_same = torch::equal(ft0->forward(x), ref);
            const double amount = 0.37;
            auto wp = prune_weights(m, amount);
            const auto total = prunable_count(wp);
            const double zeros = weight_sparsity(wp) * static_cast<double>(total);
            const bool sparsity_ok = std::abs(zeros - std::round(amount * static_cast<double>(total))) <= 1.0 + 1e-6;
            torch::GradMode::set_enabled(true);
            auto rc = cfg.reverse;
            AttackEval eval{test, torch::Tensor(), base_acc};
            const auto rev = reverse_engineer(m, data.train.slice(0, std::min<int64_t>(data.train.size(), 1000)),
                                              std::nullopt, rc, eval);
            report(9, wp_same && ft_same && sparsity_ok && rev.benign_accuracy <= 35,
                   std::string("WP 0% identical ") + (wp_same ? "yes" : "no") + ", FT 0 epochs identical " +
                       (ft_same ? "yes" : "no") + ", WP 37% zeroed " + fmt(zeros, 0) + "/" + std::to_string(total) +
                       ", reverse A1 accuracy " + fmt(rev.benign_accuracy) + " (need <= 35)");
        }
    } catch (const std::exception& e) {
        std::cout << "FAIL acceptance run aborted: " << e.what() << std::endl;
        return 1;
    }
    return failures == 0 ? 0 : 1;
}
