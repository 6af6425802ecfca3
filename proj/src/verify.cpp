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

#include "keyauth/verify.hpp"

#include <csignal>
#include <cstdlib>
#include <cstring>

#include <sys/wait.h>
#include <unistd.h>

#include "keyauth/checkpoint.hpp"
#include "keyauth/error.hpp"

namespace keyauth {

ModelEndpoint::ModelEndpoint(TappedClassifier model, std::string label) : model_(std::move(model)), label_(std::move(label)) {}

std::vector<int64_t> ModelEndpoint::query(const torch::Tensor& images) {
    const auto pred = predict(model_, images).contiguous();
    return {pred.data_ptr<int64_t>(), pred.data_ptr<int64_t>() + pred.numel()};
}

void save_image_file(const std::filesystem::path& path, const torch::Tensor& image) {
    if (image.dim() != 3) throw InvalidArgument("image file holds one [C,H,W] image");
    Checkpoint ck;
    ck.meta = {{"kind", "image"}};
    ck.arrays = {{"image", image.detach().to(torch::kFloat32).contiguous()}};
    save_checkpoint(path, ck);
}

torch::Tensor load_image_file(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    const auto* t = ck.find("image");
    if (ck.meta.value("kind", "") != "image" || !t || t->dim() != 3) throw FormatError(path.string() + ": not an image file");
    return *t;
}

ProcessEndpoint::ProcessEndpoint(std::vector<std::string> argv) : argv_(std::move(argv)) {
    if (argv_.empty()) throw InvalidArgument("process endpoint needs a command");
    std::signal(SIGPIPE, SIG_IGN);
    std::string tmpl = (std::filesystem::temp_directory_path() / "keyauth-q-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw TransportError("cannot create scratch directory for endpoint queries");
    scratch_ = tmpl;

    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) throw TransportError("pipe() failed");
    pid_ = fork();
    if (pid_ < 0) throw TransportError("fork() failed");
    if (pid_ == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        ::close(in_pipe[0]);
        ::close(in_pipe[1]);
        ::close(out_pipe[0]);
        ::close(out_pipe[1]);
        std::vector<char*> args;
        for (auto& a : argv_) args.push_back(a.data());
        args.push_back(nullptr);
        execvp(args[0], args.data());
        std::_Exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = fdopen(in_pipe[1], "w");
    from_child_ = fdopen(out_pipe[0], "r");
    if (!to_child_ || !from_child_) {
        close();
        throw TransportError("fdopen() failed");
    }
}

ProcessEndpoint::~ProcessEndpoint() { close(); }

void ProcessEndpoint::close() {
    if (to_child_) std::fclose(to_child_);
    if (from_child_) std::fclose(from_child_);
    to_child_ = from_child_ = nullptr;
    if (pid_ > 0) {
        int status = 0;
        waitpid(pid_, &status, 0);
        pid_ = -1;
    }
    std::error_code ec;
    if (!scratch_.empty()) std::filesystem::remove_all(scratch_, ec);
}

std::string ProcessEndpoint::describe() const {
    std::string s;
    for (const auto& a : argv_) s += (s.empty() ? "" : " ") + a;
    return "process: " + s;
}

std::vector<int64_t> ProcessEndpoint::query(const torch::Tensor& images) {
    if (!to_child_ || !from_child_) throw TransportError("endpoint process is not running");
    const auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
    std::vector<int64_t> labels;
    labels.reserve(static_cast<std::size_t>(x.size(0)));
    char* line = nullptr;
    std::size_t cap = 0;
    for (int64_t i = 0; i < x.size(0); ++i) {
        const auto path = scratch_ / ("q" + std::to_string(counter_++) + ".kaimg");
        save_image_file(path, x[i]);
        if (std::fprintf(to_child_, "%s\n", path.c_str()) < 0 || std::fflush(to_child_) != 0) {
            std::free(line);
            throw TransportError("endpoint closed its input after " + std::to_string(labels.size()) + " answers");
        }
        const auto got = getline(&line, &cap, from_child_);
        std::filesystem::remove(path);
        if (got <= 0) {
            std::free(line);
            throw TransportError("endpoint closed its output after " + std::to_string(labels.size()) + " answers");
        }
        char* end = nullptr;
        const long v = std::strtol(line, &end, 10);
        if (end == line || (*end != '\n' && *end != '\0' && *end != '\r')) {
            std::string text(line);
            std::free(line);
            while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
            throw TransportError("endpoint answered '" + text + "' instead of a label");
        }
        labels.push_back(v);
    }
    std::free(line);
    return labels;
}

long serve_line_protocol(TappedClassifier& model, std::FILE* in, std::FILE* out) {
    char* line = nullptr;
    std::size_t cap = 0;
    long answered = 0;
    ssize_t got;
    while ((got = getline(&line, &cap, in)) > 0) {
        std::string path(line, static_cast<std::size_t>(got));
        while (!path.empty() && (path.back() == '\n' || path.back() == '\r')) path.pop_back();
        if (path.empty()) continue;
        try {
            const auto img = load_image_file(path);
            const auto label = predict(model, img.unsqueeze(0))[0].item<int64_t>();
            std::fprintf(out, "%lld\n", static_cast<long long>(label));
        } catch (const std::exception& e) {
            std::string msg = e.what();
            for (auto& c : msg)
                if (c == '\n') c = ' ';
            std::fprintf(out, "error: %s\n", msg.c_str());
        }
        std::fflush(out);
        ++answered;
    }
    std::free(line);
    return answered;
}

nlohmann::json TraceReport::to_json() const {
    nlohmann::json j = {{"eps3", eps3}, {"confidence", confidence}, {"culprit", nullptr}};
    if (culprit) j["culprit"] = *culprit;
    for (std::size_t i = 0; i < user_ids.size(); ++i) j["tsr"][user_ids[i]] = tsr[i];
    return j;
}

TraceReport trace_intercepted(const torch::Tensor& images, StegoCodec& codec, const KeyRegistry& registry, int eps3) {
    if (registry.empty()) throw InvalidArgument("trace: registry is empty");
    if (eps3 < 0) throw InvalidArgument("trace: eps3 must be non-negative");
    const auto x = images.dim() == 3 ? images.unsqueeze(0) : images;
    if (x.size(0) == 0) throw InvalidArgument("trace: no intercepted images");
    const auto keys = extract_keys(codec, x);
    TraceReport r;
    r.eps3 = eps3;
    std::vector<long> hits(registry.size(), 0);
    for (const auto& k : keys) {
        int nearest = std::numeric_limits<int>::max();
        for (std::size_t e = 0; e < registry.size(); ++e) {
            const auto& reg = registry.entries()[e].key;
            if (reg.side != k.side || reg.channels != k.channels)
                throw InvalidArgument("trace: registry key shape differs from the codec key shape");
            const int hd = hamming_distance(k, reg);
            nearest = std::min(nearest, hd);
            if (hd <= eps3) ++hits[e];
        }
        r.nearest_distance.push_back(nearest);
    }
    std::size_t best = 0;
    for (std::size_t e = 0; e < registry.size(); ++e) {
        r.user_ids.push_back(registry.entries()[e].user_id);
        r.tsr.push_back(static_cast<double>(hits[e]) / static_cast<double>(keys.size()));
        if (r.tsr[e] > r.tsr[best]) best = e;
    }
    if (r.tsr[best] > 0) {
        r.culprit = r.user_ids[best];
        r.confidence = r.tsr[best];
    }
    return r;
}

std::string verdict_name(Verdict v) {
    switch (v) {
        case Verdict::innocent: return "innocent";
        case Verdict::pirated: return "pirated";
        case Verdict::inconclusive: return "inconclusive";
    }
    return "inconclusive";
}

nlohmann::json VerificationReport::to_json() const {
    nlohmann::json j = {{"verdict", verdict_name(verdict)},
                        {"matched_user", nullptr},
                        {"benign_accuracy", benign_accuracy},
                        {"eps1", eps1},
                        {"eps2", eps2},
                        {"baseline_accuracy", baseline_accuracy},
                        {"collusion", collusion}};
    if (matched_user) j["matched_user"] = *matched_user;
    if (error) j["error"] = *error;
    j["per_key"] = nlohmann::json::array();
    for (const auto& k : per_key)
        j["per_key"].push_back({{"user_id", k.user_id}, {"accuracy", k.accuracy}, {"unlocks", k.unlocks}});
    return j;
}

namespace {

double endpoint_accuracy(Endpoint& ep, const torch::Tensor& images, const torch::Tensor& labels) {
    const auto pred = ep.query(images);
    if (static_cast<int64_t>(pred.size()) != labels.size(0)) throw TransportError("endpoint returned a short answer list");
    const auto* y = labels.data_ptr<int64_t>();
    long ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == y[i];
    return 100.0 * static_cast<double>(ok) / static_cast<double>(pred.size());
}

}  // namespace

VerificationReport blackbox_verify(Endpoint& endpoint, const Dataset& queries, StegoCodec& codec,
                                   const KeyRegistry& registry, const VerifyThresholds& thr, double baseline_accuracy) {
    if (queries.size() == 0) throw InvalidArgument("verify: empty query set");
    if (registry.empty()) throw InvalidArgument("verify: registry is empty");
    VerificationReport r;
    r.eps1 = thr.eps1;
    r.eps2 = thr.eps2;
    r.baseline_accuracy = baseline_accuracy;
    const auto labels = queries.labels.to(torch::kInt64).contiguous();
    const auto& g = codec.geometry;
    try {
        r.benign_accuracy = endpoint_accuracy(endpoint, queries.images, labels);
        for (const auto& e : registry.entries()) {
            const auto enc = encode(codec, queries.images, expand_key(e.key, g.height, g.width));
            KeyAccuracy ka{e.user_id, endpoint_accuracy(endpoint, enc, labels), false};
            ka.unlocks = baseline_accuracy - ka.accuracy < thr.eps1 && ka.accuracy - r.benign_accuracy > thr.eps2;
            r.per_key.push_back(ka);
        }
    } catch (const TransportError& e) {
        r.error = e.what();
        r.verdict = Verdict::inconclusive;
        return r;
    }
    std::vector<std::string> unlocking;
    for (const auto& k : r.per_key)
        if (k.unlocks) unlocking.push_back(k.user_id);
    if (unlocking.size() == 1) {
        r.verdict = Verdict::pirated;
        r.matched_user = unlocking.front();
    } else if (unlocking.size() > 1) {
        r.verdict = Verdict::inconclusive;
        r.collusion = true;
    } else {
        r.verdict = baseline_accuracy - r.benign_accuracy < thr.eps2 ? Verdict::innocent : Verdict::inconclusive;
    }
    return r;
}

bool traced_correctly(const SuspectOutcome& s) {
    if (!s.true_culprit) return s.report.verdict == Verdict::innocent;
    return s.report.verdict == Verdict::pirated && s.report.matched_user == s.true_culprit;
}

double tracing_accuracy(const std::vector<SuspectOutcome>& results) {
    if (results.empty()) throw InvalidArgument("tracing_accuracy: no suspects");
    long ok = 0;
    for (const auto& s : results) ok += traced_correctly(s);
    return 100.0 * static_cast<double>(ok) / static_cast<double>(results.size());
}

}  // namespace keyauth
