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

#include "keyauth/pipeline.hpp"

#include <algorithm>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include "keyauth/checkpoint.hpp"
#include "keyauth/error.hpp"
#include "keyauth/training.hpp"

namespace keyauth {

namespace fs = std::filesystem;

namespace {

std::string artifact_hash(const nlohmann::json& meta) {
    if (meta.contains("extra") && meta["extra"].is_object()) return meta["extra"].value("config_hash", "");
    return "";
}

nlohmann::json stamp(const RunDir& run) { return {{"config_hash", run.config_hash()}, {"seed", run.config().seed}}; }

void write_text(const fs::path& p, const std::string& text) {
    const auto tmp = p.string() + ".tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw InvalidArgument("cannot write " + p.string());
        os << text;
    }
    fs::rename(tmp, p);
}

}  // namespace

RunDir::RunDir(const fs::path& out, const PipelineConfig& cfg) : root_(out / cfg.name), cfg_(cfg), hash_(keyauth::config_hash(cfg)) {
    for (const char* sub : {"codec", "baseline", "experts", "protected", "reports"}) fs::create_directories(root_ / sub);
    lock_fd_ = ::open((root_ / ".lock").c_str(), O_CREAT | O_RDWR, 0644);
    if (lock_fd_ < 0) throw InvalidArgument("cannot open lock file in " + root_.string());
    if (flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(lock_fd_);
        lock_fd_ = -1;
        throw PreconditionError("lock", "run directory " + root_.string() + " is in use by another process");
    }
    const auto ini = root_ / "config.ini";
    if (!fs::exists(ini)) write_text(ini, config_to_ini(cfg));
    write_text(root_ / "reports" / "config_hash.txt", hash_ + "\n");
}

RunDir::~RunDir() {
    if (lock_fd_ >= 0) {
        flock(lock_fd_, LOCK_UN);
        ::close(lock_fd_);
    }
}

void RunDir::require(const fs::path& artifact, const std::string& stage) const {
    if (!fs::exists(artifact))
        throw PreconditionError(stage, "missing " + stage + " output " + artifact.string() + "; run that stage first");
    const auto ck = load_checkpoint(artifact);
    const auto h = artifact_hash(ck.meta);
    if (h != hash_)
        throw PreconditionError(stage, artifact.string() + " was produced under config hash " + (h.empty() ? "?" : h) +
                                           ", current config hash is " + hash_);
}

CsvMetrics::CsvMetrics(const fs::path& path, const std::string& stage)
    : out_(std::make_shared<std::ofstream>(path, std::ios::app)), stage_(stage) {
    if (!*out_) throw InvalidArgument("cannot open metrics file " + path.string());
    if (fs::file_size(path) == 0) *out_ << "stage,step,metric,value\n";
}

MetricsSink CsvMetrics::sink() {
    auto out = out_;
    auto stage = stage_;
    return [out, stage](long step, const std::vector<std::pair<std::string, double>>& values) {
        for (const auto& [k, v] : values) *out << stage << ',' << step << ',' << k << ',' << v << '\n';
        out->flush();
    };
}

RunData load_run_data(const PipelineConfig& cfg) {
    RunData d;
    const auto& dc = cfg.data;
    const auto s = cfg.seed;
    if (dc.source == "toy") {
        d.train = make_toy_dataset(dc.train_size, derive_seed(s, 1001), dc.image_size);
        d.test = make_toy_dataset(dc.test_size, derive_seed(s, 1002), dc.image_size);
        d.codec_train = make_toy_dataset(cfg.codec_train_size, derive_seed(s, 1003), dc.image_size);
        d.codec_test = make_toy_dataset(500, derive_seed(s, 1004), dc.image_size);
        return d;
    }
    auto all = load_named_dataset(dc.source, 0, derive_seed(s, 1001), dc.image_size);
    auto gen = make_generator(derive_seed(s, 1005));
    all = all.subset(torch::randperm(all.size(), gen, torch::TensorOptions().dtype(torch::kInt64)));
    if (!dc.test_source.empty()) {
        d.test = load_named_dataset(dc.test_source, dc.test_size, derive_seed(s, 1002), dc.image_size);
        d.train = all.slice(0, std::min(all.size(), dc.train_size));
    } else {
        const auto n_test = std::min(dc.test_size, all.size() / 5);
        d.test = all.slice(0, n_test);
        d.train = all.slice(n_test, std::min(all.size(), n_test + dc.train_size));
    }
    d.codec_train = d.train.slice(0, std::min(d.train.size(), cfg.codec_train_size));
    d.codec_test = d.test.slice(0, std::min<int64_t>(d.test.size(), 500));
    return d;
}

UserKey user_key(const PipelineConfig& cfg, const std::string& user_id) {
    return generate_key(user_id, cfg.key.side, cfg.key.channels, derive_seed(cfg.seed, 7000));
}

AccuracyTriple accuracy_triple(TappedClassifier& model, StegoCodec& codec, const Dataset& test, const UserKey& key,
                               std::uint64_t seed) {
    DomainTriple t(test, key, std::make_shared<StegoCodec>(codec), seed);
    AccuracyTriple a;
    a.authorized = accuracy(model, t.all(Domain::authorized), test.labels);
    a.benign = accuracy(model, test.images, test.labels);
    a.noise = accuracy(model, t.all(Domain::noise), test.labels);
    return a;
}

StegoCodec load_run_codec(const RunDir& run) {
    run.require(run.codec_path(), "train-codec");
    return load_codec(run.codec_path());
}

TappedClassifier load_run_baseline(const RunDir& run, double* test_accuracy) {
    run.require(run.baseline_path(), "train-baseline");
    const auto ck = load_checkpoint(run.baseline_path());
    if (test_accuracy) *test_accuracy = ck.meta.at("extra").value("test_accuracy", 0.0);
    return classifier_from_checkpoint(ck);
}

KeyRegistry load_run_registry(const RunDir& run) {
    if (!fs::exists(run.registry_path()))
        throw PreconditionError("protect", "missing registry " + run.registry_path().string() + "; run protect first");
    auto reg = KeyRegistry::load(run.registry_path());
    if (!reg.config_hash.empty() && reg.config_hash != run.config_hash())
        throw PreconditionError("protect", "registry was written under config hash " + reg.config_hash);
    return reg;
}

StegoCodec stage_train_codec(RunDir& run, const RunData& data) {
    const auto& cfg = run.config();
    CsvMetrics metrics(run.reports() / "codec_metrics.csv", "codec");
    auto codec = train_codec(data.codec_train.images, cfg.geometry(), cfg.codec, metrics.sink());
    // Round-trip and fidelity on held-out images with one fixed probe key.
    const auto probe = generate_key("codec-probe", cfg.key.side, cfg.key.channels, derive_seed(cfg.seed, 7001));
    const auto stego = encode(codec, data.codec_test.images, expand_key(probe, cfg.data.image_size, cfg.data.image_size));
    const auto keys = extract_keys(codec, stego);
    long ok = 0;
    for (const auto& k : keys) ok += hamming_distance(k, probe) <= cfg.eps3;
    const auto q = iqa(data.codec_test.images, stego);
    nlohmann::json summary = {{"roundtrip_rate", static_cast<double>(ok) / static_cast<double>(keys.size())},
                              {"eps3", cfg.eps3},
                              {"heldout_images", keys.size()},
                              {"bit_accuracy", bit_accuracy(codec, data.codec_test.images, derive_seed(cfg.seed, 7002))},
                              {"ssim_mean", q.ssim.mean},
                              {"ssim_std", q.ssim.std},
                              {"psnr_mean", q.psnr.mean},
                              {"psnr_std", q.psnr.std}};
    auto extra = stamp(run);
    extra["summary"] = summary;
    save_codec(run.codec_path(), codec, extra);
    write_text(run.reports() / "codec.json", summary.dump(2) + "\n");
    return codec;
}

TappedClassifier stage_train_baseline(RunDir& run, const RunData& data) {
    const auto& cfg = run.config();
    CsvMetrics metrics(run.reports() / "baseline_metrics.csv", "baseline");
    auto model = train_baseline(data.train, cfg.classifier, cfg.baseline, metrics.sink());
    const double acc = accuracy(model, data.test.images, data.test.labels);
    auto extra = stamp(run);
    extra["test_accuracy"] = acc;
    save_classifier(run.baseline_path(), model, extra);
    write_text(run.reports() / "baseline.json", nlohmann::json{{"test_accuracy", acc}}.dump(2) + "\n");
    return model;
}

std::vector<ProtectOutcome> stage_protect(RunDir& run, const RunData& data, const std::vector<std::string>& users,
                                          bool simple_distill) {
    if (users.empty()) throw InvalidArgument("protect: no user ids given");
    const auto& cfg = run.config();
    auto codec = std::make_shared<StegoCodec>(load_run_codec(run));
    double baseline_acc = 0;
    auto base = load_run_baseline(run, &baseline_acc);

    KeyRegistry registry;
    if (fs::exists(run.registry_path())) registry = load_run_registry(run);
    registry.config_hash = run.config_hash();

    std::vector<ProtectOutcome> outcomes;
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& user : users) {
        const auto key = user_key(cfg, user);
        const auto user_seed = derive_seed(cfg.seed, fnv1a64(user));
        const auto suffix = simple_distill ? user + ".simple" : user;
        const auto prot_path = run.protected_path(suffix);
        ProtectOutcome out;
        out.user_id = user;

        bool have_prot = false;
        if (fs::exists(prot_path)) {
            const auto ck = load_checkpoint(prot_path);
            have_prot = artifact_hash(ck.meta) == run.config_hash() &&
                        ck.meta.value("key_fingerprint", "") == key_fingerprint(key);
        }
        if (have_prot) {
            out.model = load_protected(prot_path);
            out.reused = true;
        } else {
            DomainTriple triple(data.train, key, codec, derive_seed(user_seed, 1));
            ExpertEnsemble ens;
            bool have_experts = false;
            if (fs::exists(run.experts_path(user))) {
                const auto ck = load_checkpoint(run.experts_path(user));
                have_experts = artifact_hash(ck.meta) == run.config_hash() &&
                               ck.meta.value("key_fingerprint", "") == key_fingerprint(key);
            }
            if (have_experts) {
                ens = load_ensemble(run.experts_path(user));
            } else {
                CsvMetrics metrics(run.reports() / ("experts_" + user + ".csv"), "experts");
                auto real_cfg = cfg.real;
                real_cfg.seed = derive_seed(user_seed, 2);
                ens.real = finetune_real(base, triple, real_cfg, metrics.sink());
                auto fake_cfg = cfg.fake;
                fake_cfg.mi_log = run.reports() / ("mi_" + user + ".csv");
                fake_cfg.seed = derive_seed(user_seed, 3);
                ens.fake_benign = train_fake(ens.real, Domain::benign, triple, fake_cfg, metrics.sink());
                fake_cfg.seed = derive_seed(user_seed, 4);
                ens.fake_noise = train_fake(ens.real, Domain::noise, triple, fake_cfg, metrics.sink());
                ens.key_fingerprint = key_fingerprint(key);
                save_ensemble(run.experts_path(user), ens, stamp(run));
            }
            {
                // Teacher accuracy per domain on held-out images.
                DomainTriple held(data.test, key, codec, derive_seed(user_seed, 6));
                CsvMetrics metrics(run.reports() / ("experts_" + user + ".csv"), "experts");
                const std::vector<std::pair<std::string, double>> acc{
                    {"acc_real_authorized", accuracy(ens.real, held.all(Domain::authorized), data.test.labels)},
                    {"acc_real_benign", accuracy(ens.real, data.test.images, data.test.labels)},
                    {"acc_fake_benign", accuracy(ens.fake_benign, data.test.images, data.test.labels)},
                    {"acc_fake_noise", accuracy(ens.fake_noise, held.all(Domain::noise), data.test.labels)}};
                metrics.sink()(-1, acc);
                for (const auto& [k, v] : acc) out.teacher[k] = v;
            }
            auto dcfg = cfg.distill;
            dcfg.seed = derive_seed(user_seed, 5);
            if (simple_distill) dcfg.lambda_at = dcfg.lambda_crd = 0;
            CsvMetrics metrics(run.reports() / ("distill_" + suffix + ".csv"), "distill");
            out.model = distill_student(ens, triple, dcfg, metrics.sink());
            save_protected(prot_path, out.model, stamp(run));
        }
        out.triple = accuracy_triple(out.model.model, *codec, data.test, key, derive_seed(user_seed, 6));
        if (!simple_distill) {
            if (const auto* e = registry.find(user)) {
                if (!e->key.same_bits(key)) throw PreconditionError("protect", "registry holds a different key for " + user);
            } else {
                registry.add({user, key, fs::relative(prot_path, run.root()).string()});
            }
        }
        manifest.push_back({{"user_id", user},
                            {"checkpoint", fs::relative(prot_path, run.root()).string()},
                            {"key_fingerprint", key_fingerprint(key)},
                            {"simple_distill", simple_distill},
                            {"reused", out.reused},
                            {"accuracy", out.triple.to_json()},
                            {"teacher_accuracy", out.teacher},
                            {"baseline_accuracy", baseline_acc},
                            {"config_hash", run.config_hash()}});
        write_text(run.reports() / ("protect_" + suffix + ".json"), manifest.back().dump(2) + "\n");
        outcomes.push_back(std::move(out));
    }
    if (!simple_distill) registry.save(run.registry_path());
    write_text(run.reports() / (simple_distill ? "manifest_simple.json" : "manifest.json"), manifest.dump(2) + "\n");
    return outcomes;
}

nlohmann::json stage_confusion(RunDir& run, const RunData& data) {
    auto codec = load_run_codec(run);
    const auto registry = load_run_registry(run);
    const int size = run.config().data.image_size;
    std::vector<torch::Tensor> encoded;
    for (const auto& e : registry.entries())
        encoded.push_back(encode(codec, data.test.images, expand_key(e.key, size, size)));
    nlohmann::json j = {{"users", nlohmann::json::array()}, {"accuracy", nlohmann::json::array()}};
    for (const auto& e : registry.entries()) {
        j["users"].push_back(e.user_id);
        auto pm = load_protected(run.root() / e.checkpoint);
        nlohmann::json row = nlohmann::json::array();
        for (const auto& x : encoded) row.push_back(accuracy(pm.model, x, data.test.labels));
        j["accuracy"].push_back(row);
    }
    write_text(run.reports() / "confusion.json", j.dump(2) + "\n");
    return j;
}

std::string build_report(const fs::path& run_root, std::vector<std::string>* warnings) {
    if (!fs::is_directory(run_root)) throw InvalidArgument(run_root.string() + " is not a run directory");
    const auto rep = run_root / "reports";
    if (!fs::is_directory(rep) || fs::is_empty(rep)) throw InvalidArgument(run_root.string() + " has no reports");
    std::vector<std::string> warn;
    std::set<std::string> hashes;
    for (const auto* sub : {"codec", "baseline", "experts", "protected"}) {
        if (!fs::is_directory(run_root / sub)) continue;
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(run_root / sub))
            if (e.path().extension() == ".ckpt") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            try {
                hashes.insert(artifact_hash(load_checkpoint(f).meta));
            } catch (const std::exception& e) {
                warn.push_back(f.string() + ": " + e.what());
            }
        }
    }
    if (hashes.size() > 1) {
        std::string all;
        for (const auto& h : hashes) all += " " + (h.empty() ? std::string("<none>") : h);
        throw FormatError("run directory mixes artifacts from different configs:" + all);
    }

    auto read_json = [&](const fs::path& p) -> std::optional<nlohmann::json> {
        if (!fs::exists(p)) return std::nullopt;
        try {
            std::ifstream in(p);
            return nlohmann::json::parse(in);
        } catch (const std::exception& e) {
            warn.push_back(p.filename().string() + ": " + e.what());
            return std::nullopt;
        }
    };
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << "run: " << run_root.filename().string() << "\n";
    if (!hashes.empty()) os << "config hash: " << *hashes.begin() << "\n";
    if (auto j = read_json(rep / "codec.json")) {
        os << "\n[codec]\n  round-trip (HD <= " << j->value("eps3", 1) << "): " << 100 * j->value("roundtrip_rate", 0.0)
           << "% of " << j->value("heldout_images", 0) << " held-out images\n  bit accuracy: "
           << 100 * j->value("bit_accuracy", 0.0) << "%\n  SSIM: " << std::setprecision(4) << j->value("ssim_mean", 0.0)
           << " +- " << j->value("ssim_std", 0.0) << std::setprecision(2) << "\n  PSNR: " << j->value("psnr_mean", 0.0)
           << " +- " << j->value("psnr_std", 0.0) << " dB\n";
    }
    if (auto j = read_json(rep / "baseline.json")) os << "\n[baseline]\n  test accuracy: " << j->value("test_accuracy", 0.0) << "%\n";
    for (const char* which : {"manifest.json", "manifest_simple.json"}) {
        if (auto j = read_json(rep / which)) {
            os << "\n[" << (std::string(which) == "manifest.json" ? "protected" : "simple-distilled")
               << "]  authorized / benign / noise accuracy\n";
            for (const auto& e : *j) {
                const auto& a = e.at("accuracy");
                os << "  " << e.value("user_id", "?") << ": " << a.value("authorized", 0.0) << " / " << a.value("benign", 0.0)
                   << " / " << a.value("noise", 0.0) << "\n";
            }
        }
    }
    if (auto j = read_json(rep / "confusion.json")) {
        os << "\n[key confusion]  rows: model, columns: key\n";
        const auto users = j->at("users").get<std::vector<std::string>>();
        const auto m = j->at("accuracy");
        for (std::size_t r = 0; r < users.size(); ++r) {
            os << "  " << users[r] << ":";
            for (std::size_t c = 0; c < users.size(); ++c) os << " " << m[r][c].get<double>();
            os << "\n";
        }
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(rep)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        const auto name = f.filename().string();
        if (name.rfind("verify_", 0) == 0 && f.extension() == ".json") {
            if (auto j = read_json(f)) {
                os << "\n[verify " << name.substr(7, name.size() - 12) << "]\n  verdict: " << j->value("verdict", "?");
                if (j->contains("matched_user") && !(*j)["matched_user"].is_null())
                    os << " (" << (*j)["matched_user"].get<std::string>() << ")";
                os << "\n  benign accuracy: " << j->value("benign_accuracy", 0.0) << "%\n";
            }
        } else if (name.rfind("trace", 0) == 0 && f.extension() == ".json") {
            if (auto j = read_json(f)) {
                os << "\n[" << f.stem().string() << "]\n";
                if (j->contains("tsr"))
                    for (auto it = (*j)["tsr"].begin(); it != (*j)["tsr"].end(); ++it)
                        os << "  TSR " << it.key() << ": " << it.value().get<double>() << "\n";
                if (!(*j)["culprit"].is_null()) os << "  culprit: " << (*j)["culprit"].get<std::string>() << "\n";
            }
        } else if (f.extension() == ".csv" && (name == "attacks.csv" || name.rfind("flipbits", 0) == 0)) {
            std::ifstream in(f);
            os << "\n[" << f.stem().string() << "]\n";
            std::string line;
            while (std::getline(in, line)) os << "  " << line << "\n";
        }
    }
    if (!warn.empty()) {
        os << "\n[warnings]\n";
        for (const auto& w : warn) os << "  " << w << "\n";
    }
    if (warnings) *warnings = warn;
    return os.str();
}

}  // namespace keyauth
