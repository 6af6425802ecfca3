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

// keyauth command-line front end.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "keyauth/attacks.hpp"
#include "keyauth/checkpoint.hpp"
#include "keyauth/config.hpp"
#include "keyauth/error.hpp"
#include "keyauth/pipeline.hpp"
#include "keyauth/verify.hpp"

using namespace keyauth;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "runs";
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "INI pipeline configuration (defaults apply when omitted)");
    cmd->add_option("--seed", c.seed, "Overrides [run] seed");
    cmd->add_option("--out", c.out, "Output root; the run lives in <out>/<run name>")->capture_default_str();
}

PipelineConfig load(const Common& c) {
    auto cfg = c.config.empty() ? PipelineConfig{} : load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    cfg.propagate();
    cfg.validate();
    return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    if (!os) throw InvalidArgument("cannot write " + p.string());
    os << text;
}

void append_attack_row(const fs::path& csv, const AttackResult& r) {
    const bool fresh = !fs::exists(csv);
    std::ofstream os(csv, std::ios::app);
    if (fresh) os << AttackResult::csv_header() << "\n";
    os << r.csv_row() << "\n";
    std::cout << r.csv_row() << "\n";
}

// Images to trace: a packed dataset file, a single image file, or a directory of image files.
torch::Tensor load_intercepted(const fs::path& p) {
    if (fs::is_directory(p)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(p))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        std::vector<torch::Tensor> ims;
        for (const auto& f : files) ims.push_back(load_image_file(f));
        if (ims.empty()) throw InvalidArgument(p.string() + " holds no image files");
        return torch::stack(ims);
    }
    const auto ck = load_checkpoint(p);
    if (ck.meta.value("kind", "") == "image") return load_image_file(p).unsqueeze(0);
    return load_dataset(p).images;
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    CLI::App app{"Key-based active authorization for image classifiers"};
    app.require_subcommand(1);

    // make-toy
    Common toy_c;
    int64_t toy_n = 1000;
    int toy_size = 32;
    std::string toy_file;
    auto* toy = app.add_subcommand("make-toy", "Write a synthetic 10-class dataset as a packed file");
    toy->add_option("--n", toy_n, "Number of images")->capture_default_str();
    toy->add_option("--size", toy_size, "Image side")->capture_default_str();
    toy->add_option("--seed", toy_c.seed, "Generator seed");
    toy->add_option("--out", toy_file, "Output file")->required();

    // train-codec
    Common codec_c;
    std::string codec_data;
    std::optional<int> codec_r, codec_ch, codec_epochs;
    auto* tcodec = app.add_subcommand("train-codec", "Train the steganographic key codec");
    add_common(tcodec, codec_c);
    tcodec->add_option("--data", codec_data, "Dataset: 'toy', a packed file, or an image-folder root");
    tcodec->add_option("--r", codec_r, "Key side r");
    tcodec->add_option("--c", codec_ch, "Key channels c");
    tcodec->add_option("--epochs", codec_epochs, "Codec training epochs");

    // train-baseline
    Common base_c;
    std::string base_data;
    std::optional<int> base_epochs;
    auto* tbase = app.add_subcommand("train-baseline", "Train the unprotected classifier");
    add_common(tbase, base_c);
    tbase->add_option("--data", base_data, "Dataset: 'toy', a packed file, or an image-folder root");
    tbase->add_option("--epochs", base_epochs, "Training epochs");

    // protect
    Common prot_c;
    std::string prot_users = "user1";
    bool prot_simple = false;
    auto* prot = app.add_subcommand("protect", "Build protected models for a list of users");
    add_common(prot, prot_c);
    prot->add_option("--users", prot_users, "Comma-separated user ids")->capture_default_str();
    prot->add_flag("--simple", prot_simple, "Distill with the KL term only (ablation); not registered");

    // verify
    Common ver_c;
    std::string ver_ckpt, ver_cmd, ver_name = "suspect";
    std::optional<double> ver_base;
    auto* ver = app.add_subcommand("verify", "Black-box ownership verification of a suspect model");
    add_common(ver, ver_c);
    auto* o1 = ver->add_option("--suspect", ver_ckpt, "Suspect checkpoint (in-process endpoint)");
    auto* o2 = ver->add_option("--suspect-cmd", ver_cmd, "Suspect process speaking the line protocol");
    o1->excludes(o2);
    ver->add_option("--name", ver_name, "Report name")->capture_default_str();
    ver->add_option("--baseline-acc", ver_base, "Reference accuracy (default: the run's baseline)");

    // trace
    Common tr_c;
    std::string tr_images, tr_name = "trace";
    auto* tr = app.add_subcommand("trace", "Trace the culprit from intercepted images");
    add_common(tr, tr_c);
    tr->add_option("--images", tr_images, "Packed dataset, image file, or directory of image files")->required();
    tr->add_option("--name", tr_name, "Report name")->capture_default_str();

    // attack
    Common at_c;
    std::string at_model, at_user, at_kind = "FTAL";
    std::optional<double> at_amount, at_fraction;
    std::optional<int> at_epochs;
    bool at_sweep = false;
    auto* at = app.add_subcommand("attack", "Run a robustness attack against a protected model");
    add_common(at, at_c);
    at->add_option("--model", at_model, "Protected checkpoint (default: protected/<user>.ckpt)");
    at->add_option("--user", at_user, "Registered user whose key defines the authorized test set")->required();
    at->add_option("--kind", at_kind, "FTAL, FTLL, RTAL, RTLL, WP, FP, transfer, reverse_a1, reverse_a2")
        ->capture_default_str();
    at->add_option("--amount", at_amount, "Pruning amount in [0,1]");
    at->add_option("--fraction", at_fraction, "Fine-tuning data fraction");
    at->add_option("--epochs", at_epochs, "Fine-tuning / transfer epochs");
    at->add_flag("--sweep", at_sweep, "Pruning sweep (WP 0..95% step 5, FP 0..100% step 10) with an SVG plot");

    // flipbits
    Common fb_c;
    std::string fb_user;
    int fb_max = 24, fb_trials = 5;
    auto* fb = app.add_subcommand("flipbits", "Accuracy of a protected model under corrupted keys");
    add_common(fb, fb_c);
    fb->add_option("--user", fb_user, "Registered user")->required();
    fb->add_option("--max-flips", fb_max, "Largest number of flipped bits")->capture_default_str();
    fb->add_option("--trials", fb_trials, "Random corrupted keys per flip count")->capture_default_str();

    // report
    Common rep_c;
    auto* rep = app.add_subcommand("report", "Summarize a run directory");
    add_common(rep, rep_c);

    // serve
    std::string srv_model;
    auto* srv = app.add_subcommand("serve", "Answer line-protocol queries (image path in, label out) on stdio");
    srv->add_option("--model", srv_model, "Classifier or protected checkpoint")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*toy) {
            save_dataset(toy_file, make_toy_dataset(toy_n, toy_c.seed.value_or(0), toy_size));
            std::cout << "wrote " << toy_n << " images to " << toy_file << "\n";
            return 0;
        }
        if (*srv) {
            const auto ck = load_checkpoint(srv_model);
            auto model = classifier_from_checkpoint(ck);
            serve_line_protocol(model, stdin, stdout);
            return 0;
        }
        if (*tcodec) {
            auto cfg = load(codec_c);
            if (!codec_data.empty()) cfg.data.source = codec_data;
            if (codec_r) cfg.key.side = *codec_r;
            if (codec_ch) cfg.key.channels = *codec_ch;
            if (codec_epochs) cfg.codec.epochs = *codec_epochs;
            cfg.validate();
            const auto data = load_run_data(cfg);
            if (fs::path(codec_c.out).extension() == ".ckpt") {
                auto codec = train_codec(data.codec_train.images, cfg.geometry(), cfg.codec);
                save_codec(codec_c.out, codec, {{"config_hash", config_hash(cfg)}});
                std::cout << "codec written to " << codec_c.out << "\n";
                return 0;
            }
            RunDir run(codec_c.out, cfg);
            stage_train_codec(run, data);
            std::ifstream in(run.reports() / "codec.json");
            std::cout << in.rdbuf();
            return 0;
        }
        if (*tbase) {
            auto cfg = load(base_c);
            if (!base_data.empty()) cfg.data.source = base_data;
            if (base_epochs) cfg.baseline.epochs = *base_epochs;
            cfg.validate();
            RunDir run(base_c.out, cfg);
            stage_train_baseline(run, load_run_data(cfg));
            std::ifstream in(run.reports() / "baseline.json");
            std::cout << in.rdbuf();
            return 0;
        }
        if (*prot) {
            const auto cfg = load(prot_c);
            RunDir run(prot_c.out, cfg);
            const auto data = load_run_data(cfg);
            for (const auto& o : stage_protect(run, data, split_csv(prot_users), prot_simple))
                std::cout << o.user_id << (o.reused ? " (reused)" : "") << ": authorized " << o.triple.authorized
                          << "  benign " << o.triple.benign << "  noise " << o.triple.noise << "\n";
            if (!prot_simple) stage_confusion(run, data);
            return 0;
        }
        if (*ver) {
            const auto cfg = load(ver_c);
            RunDir run(ver_c.out, cfg);
            const auto data = load_run_data(cfg);
            auto codec = load_run_codec(run);
            double base_acc = 0;
            load_run_baseline(run, &base_acc);
            if (ver_base) base_acc = *ver_base;
            const auto registry = load_run_registry(run);
            std::unique_ptr<Endpoint> ep;
            if (!ver_cmd.empty()) {
                std::vector<std::string> args;
                std::istringstream ss(ver_cmd);
                for (std::string a; ss >> a;) args.push_back(a);
                ep = std::make_unique<ProcessEndpoint>(args);
            } else if (!ver_ckpt.empty()) {
                ep = std::make_unique<ModelEndpoint>(classifier_from_checkpoint(load_checkpoint(ver_ckpt)), ver_ckpt);
            } else {
                throw InvalidArgument("verify needs --suspect or --suspect-cmd");
            }
            const auto queries = data.test.slice(0, std::min(cfg.query_size, data.test.size()));
            const auto r = blackbox_verify(*ep, queries, codec, registry, cfg.verify, base_acc);
            auto j = r.to_json();
            j["endpoint"] = ep->describe();
            write_file(run.reports() / ("verify_" + ver_name + ".json"), j.dump(2) + "\n");
            std::cout << j.dump(2) << "\n";
            return r.error ? 3 : 0;
        }
        if (*tr) {
            const auto cfg = load(tr_c);
            RunDir run(tr_c.out, cfg);
            auto codec = load_run_codec(run);
            const auto r = trace_intercepted(load_intercepted(tr_images), codec, load_run_registry(run), cfg.eps3);
            write_file(run.reports() / (tr_name + ".json"), r.to_json().dump(2) + "\n");
            std::cout << r.to_json().dump(2) << "\n";
            return 0;
        }
        if (*at) {
            auto cfg = load(at_c);
            RunDir run(at_c.out, cfg);
            const auto data = load_run_data(cfg);
            auto codec = load_run_codec(run);
            double base_acc = 0;
            auto baseline = load_run_baseline(run, &base_acc);
            const auto path = at_model.empty() ? run.protected_path(at_user) : fs::path(at_model);
            auto victim = classifier_from_checkpoint(load_checkpoint(path));
            const auto key = user_key(cfg, at_user);
            const int size = cfg.data.image_size;
            AttackEval eval{data.test, encode(codec, data.test.images, expand_key(key, size, size)), base_acc};
            const auto csv = run.reports() / "attacks.csv";
            if (at_kind == "WP" || at_kind == "FP") {
                const auto mode = parse_prune_mode(at_kind);
                std::vector<double> amounts;
                if (at_sweep) {
                    for (int p = 0; p <= (mode == PruneMode::WP ? 95 : 100); p += mode == PruneMode::WP ? 5 : 10)
                        amounts.push_back(p / 100.0);
                } else {
                    amounts.push_back(at_amount.value_or(0.3));
                }
                std::vector<AttackResult> rows;
                for (double a : amounts) {
                    rows.push_back(prune_attack(victim, mode, a, eval));
                    append_attack_row(csv, rows.back());
                }
                if (at_sweep) {
                    const auto svg = run.reports() / ("prune_" + at_kind + ".svg");
                    write_prune_svg(svg, rows, at_kind + " pruning: " + at_user);
                    std::cout << "plot: " << svg.string() << "\n";
                }
            } else if (at_kind == "transfer") {
                auto tcfg = cfg.transfer;
                if (at_epochs) tcfg.epochs = *at_epochs;
                const auto reference = transfer_attack(baseline, data.train, data.test, tcfg, base_acc);
                auto r = transfer_attack(victim, data.train, data.test, tcfg, reference.benign_accuracy);
                r.params["reference"] = "unprotected";
                append_attack_row(csv, r);
            } else if (at_kind == "reverse_a1" || at_kind == "reverse_a2") {
                auto subset = data.train.sample_fraction(cfg.finetune.data_fraction, derive_seed(cfg.seed, 7100));
                std::optional<torch::Tensor> pairs;
                if (at_kind == "reverse_a2") pairs = encode(codec, subset.images, expand_key(key, size, size));
                append_attack_row(csv, reverse_engineer(victim, subset, pairs, cfg.reverse, eval));
            } else {
                auto fcfg = cfg.finetune;
                fcfg.strategy = parse_strategy(at_kind);
                if (at_fraction) fcfg.data_fraction = *at_fraction;
                if (at_epochs) fcfg.epochs = *at_epochs;
                append_attack_row(csv, finetune_attack(victim, data.train, fcfg, eval));
            }
            return 0;
        }
        if (*fb) {
            const auto cfg = load(fb_c);
            RunDir run(fb_c.out, cfg);
            const auto data = load_run_data(cfg);
            auto codec = load_run_codec(run);
            const auto registry = load_run_registry(run);
            const auto* entry = registry.find(fb_user);
            if (!entry) throw InvalidArgument("user " + fb_user + " is not registered");
            if (fb_max < 0 || fb_max > static_cast<int>(entry->key.size()))
                throw InvalidArgument("--max-flips exceeds the number of key bits");
            auto pm = load_protected(run.root() / entry->checkpoint);
            const int size = cfg.data.image_size;
            const auto csv = run.reports() / ("flipbits_" + fb_user + ".csv");
            std::ofstream os(csv);
            os << "flips,mean_accuracy,trials\n";
            for (int f = 0; f <= fb_max; ++f) {
                double sum = 0;
                const int trials = f == 0 ? 1 : fb_trials;
                for (int t = 0; t < trials; ++t) {
                    const auto k = flip_random_bits(entry->key, f, derive_seed(cfg.seed, 9000 + 100 * f + t));
                    sum += accuracy(pm.model, encode(codec, data.test.images, expand_key(k, size, size)), data.test.labels);
                }
                os << f << ',' << sum / trials << ',' << trials << "\n";
                std::cout << f << " flips: " << sum / trials << "%\n";
            }
            return 0;
        }
        if (*rep) {
            const auto cfg = load(rep_c);
            const auto root = fs::path(rep_c.out) / cfg.name;
            const auto text = build_report(root);
            write_file(root / "reports" / "summary.txt", text);
            std::cout << text;
            return 0;
        }
    } catch (const PreconditionError& e) {
        std::cerr << "precondition failed [" << e.stage() << "]: " << e.what() << "\n";
        return 2;
    } catch (const TrainingFailure& e) {
        std::cerr << "training failed (last stable step " << e.last_stable_step() << "): " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
