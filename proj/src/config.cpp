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

#include "keyauth/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "keyauth/error.hpp"

namespace keyauth {

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& where, const std::string& v, const char* want) {
    throw FormatError("config " + where + ": '" + v + "' is not " + want);
}

template <typename T>
T parse_int(const std::string& v, const std::string& where) {
    T out{};
    const auto s = trim(v);
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty()) bad(where, v, "an integer");
    return out;
}

double parse_double(const std::string& v, const std::string& where) {
    const auto s = trim(v);
    char* end = nullptr;
    const double d = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) bad(where, v, "a number");
    return d;
}

bool parse_bool(const std::string& v, const std::string& where) {
    const auto s = trim(v);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    bad(where, v, "a boolean");
}

std::vector<int> parse_list(const std::string& v, const std::string& where) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int<int>(item, where));
    if (out.empty()) bad(where, v, "a comma-separated integer list");
    return out;
}

std::string fmt(double d) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    return buf;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string fmt_list(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

struct Field {
    std::string section;
    std::string key;
    std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const PipelineConfig&)> get;
};

#define KA_INT(S, K, T, EXPR)                                                                                         \
    Field {                                                                                                           \
        S, K, [](PipelineConfig& c, const std::string& v, const std::string& w) { c.EXPR = parse_int<T>(v, w); },     \
            [](const PipelineConfig& c) { return std::to_string(c.EXPR); }                                            \
    }
#define KA_DBL(S, K, EXPR)                                                                                            \
    Field {                                                                                                           \
        S, K, [](PipelineConfig& c, const std::string& v, const std::string& w) { c.EXPR = parse_double(v, w); },     \
            [](const PipelineConfig& c) { return fmt(c.EXPR); }                                                       \
    }
#define KA_BOOL(S, K, EXPR)                                                                                           \
    Field {                                                                                                           \
        S, K, [](PipelineConfig& c, const std::string& v, const std::string& w) { c.EXPR = parse_bool(v, w); },       \
            [](const PipelineConfig& c) { return fmt_bool(c.EXPR); }                                                  \
    }
#define KA_STR(S, K, EXPR)                                                                                            \
    Field {                                                                                                           \
        S, K, [](PipelineConfig& c, const std::string& v, const std::string&) { c.EXPR = trim(v); },                  \
            [](const PipelineConfig& c) { return c.EXPR; }                                                            \
    }

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = {
        KA_STR("run", "name", name),
        KA_INT("run", "seed", std::uint64_t, seed),

        KA_STR("data", "source", data.source),
        KA_STR("data", "test_source", data.test_source),
        KA_INT("data", "train_size", int64_t, data.train_size),
        KA_INT("data", "test_size", int64_t, data.test_size),
        KA_INT("data", "image_size", int, data.image_size),
        Field{"data", "augment",
              [](PipelineConfig& c, const std::string& v, const std::string&) { c.data.augment = parse_policy(v); },
              [](const PipelineConfig& c) { return policy_to_string(c.data.augment); }},

        KA_INT("key", "r", int, key.side),
        KA_INT("key", "c", int, key.channels),

        KA_INT("codec", "train_size", int64_t, codec_train_size),
        KA_INT("codec", "hidden", int, codec_hidden),
        KA_INT("codec", "epochs", int, codec.epochs),
        KA_INT("codec", "batch", int, codec.batch),
        KA_DBL("codec", "lr", codec.lr),
        KA_DBL("codec", "critic_lr", codec.critic_lr),
        KA_DBL("codec", "weight_decode", codec.weight_decode),
        KA_DBL("codec", "weight_similarity", codec.weight_similarity),
        KA_DBL("codec", "weight_realness", codec.weight_realness),
        KA_DBL("codec", "critic_clip", codec.critic_clip),
        KA_INT("codec", "critic_steps", int, codec.critic_steps),
        KA_BOOL("codec", "tiled_messages", codec.tiled_messages),
        KA_DBL("codec", "decay_fraction", codec.decay_fraction),

        Field{"classifier", "widths",
              [](PipelineConfig& c, const std::string& v, const std::string& w) {
                  const auto l = parse_list(v, w);
                  if (l.size() != 4) throw FormatError("config " + w + ": need exactly four stage widths");
                  std::copy(l.begin(), l.end(), c.classifier.widths.begin());
              },
              [](const PipelineConfig& c) {
                  return fmt_list({c.classifier.widths.begin(), c.classifier.widths.end()});
              }},
        KA_INT("classifier", "classes", int, classifier.num_classes),

        KA_INT("baseline", "epochs", int, baseline.epochs),
        KA_INT("baseline", "batch", int, baseline.batch),
        KA_DBL("baseline", "lr", baseline.lr),
        KA_DBL("baseline", "momentum", baseline.momentum),
        KA_DBL("baseline", "weight_decay", baseline.weight_decay),

        KA_INT("real", "epochs", int, real.epochs),
        KA_INT("real", "batch", int, real.batch),
        KA_DBL("real", "lr", real.lr),

        KA_INT("fake", "iters", int, fake.iters),
        KA_INT("fake", "batch", int, fake.batch),
        KA_DBL("fake", "lr", fake.lr),
        KA_DBL("fake", "aux_lr", fake.aux_lr),
        KA_INT("fake", "aux_steps", int, fake.aux_steps),

        KA_INT("distill", "epochs", int, distill.epochs),
        KA_INT("distill", "batch", int, distill.batch),
        KA_DBL("distill", "lr", distill.lr),
        KA_DBL("distill", "lambda_at", distill.lambda_at),
        KA_DBL("distill", "lambda_crd", distill.lambda_crd),
        KA_DBL("distill", "alpha", distill.alpha),
        KA_DBL("distill", "temperature", distill.temperature),
        KA_INT("distill", "negatives", int, distill.negatives),
        KA_INT("distill", "projection", int, distill.projection),

        Field{"layers", "select",
              [](PipelineConfig& c, const std::string& v, const std::string& w) {
                  c.distill.layers.layers = parse_list(v, w);
              },
              [](const PipelineConfig& c) { return fmt_list(c.distill.layers.layers); }},

        KA_DBL("verify", "eps1", verify.eps1),
        KA_DBL("verify", "eps2", verify.eps2),
        KA_INT("verify", "eps3", int, eps3),
        KA_INT("verify", "queries", int64_t, query_size),

        KA_DBL("attack", "finetune_fraction", finetune.data_fraction),
        KA_INT("attack", "finetune_epochs", int, finetune.epochs),
        KA_DBL("attack", "finetune_lr", finetune.lr),
        KA_INT("attack", "transfer_epochs", int, transfer.epochs),
        KA_DBL("attack", "transfer_lr", transfer.lr),
        KA_INT("attack", "reverse_steps", int, reverse.steps),
        KA_DBL("attack", "reverse_lr", reverse.lr),
        KA_DBL("attack", "lambda_mse", reverse.lambda_mse),
    };
    return fields;
}

#undef KA_INT
#undef KA_DBL
#undef KA_BOOL
#undef KA_STR

}  // namespace

AugmentPolicy parse_policy(const std::string& text) {
    AugmentPolicy p;
    const auto t = trim(text);
    if (t.empty() || t == "none") return p;
    std::stringstream ss(t);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw FormatError("augmentation '" + item + "' needs name:magnitude");
        p[trim(item.substr(0, colon))] = parse_double(item.substr(colon + 1), "data.augment");
    }
    try {
        validate_policy(p);
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("config data.augment: ") + e.what());
    }
    return p;
}

std::string policy_to_string(const AugmentPolicy& p) {
    if (p.empty()) return "none";
    std::string s;
    for (const auto& [k, v] : p) s += (s.empty() ? "" : ",") + k + ":" + fmt(v);
    return s;
}

void PipelineConfig::propagate() {
    codec.seed = derive_seed(seed, 1);
    baseline.seed = derive_seed(seed, 2);
    real.seed = derive_seed(seed, 3);
    fake.seed = derive_seed(seed, 4);
    distill.seed = derive_seed(seed, 5);
    finetune.seed = derive_seed(seed, 6);
    transfer.seed = derive_seed(seed, 7);
    reverse.seed = derive_seed(seed, 8);
    baseline.augment = data.augment;
    real.augment = data.augment;
    distill.augment = data.augment;
    fake.layers = distill.layers;
    reverse.hidden = codec_hidden;
}

CodecGeometry PipelineConfig::geometry() const {
    CodecGeometry g;
    g.height = g.width = data.image_size;
    g.key_side = key.side;
    g.key_channels = key.channels;
    g.hidden = codec_hidden;
    return g;
}

void PipelineConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw FormatError("config: " + what);
    };
    need(!name.empty() && name.find('/') == std::string::npos, "run.name must be a plain directory name");
    need(data.train_size > 0 && data.test_size > 0, "data sizes must be positive");
    need(codec_train_size > 0, "codec.train_size must be positive");
    need(codec.epochs >= 0 && baseline.epochs >= 0 && real.epochs >= 0 && fake.iters >= 0 && distill.epochs >= 0,
         "epoch budgets must be non-negative");
    need(codec.lr > 0 && baseline.lr > 0 && real.lr > 0 && fake.lr > 0 && distill.lr > 0, "learning rates must be positive");
    need(verify.eps1 >= 0 && verify.eps2 >= 0 && eps3 >= 0, "verification thresholds must be non-negative");
    need(query_size > 0, "verify.queries must be positive");
    for (int w : classifier.widths) need(w > 0, "classifier widths must be positive");
    need(classifier.num_classes >= 2, "classifier.classes must be at least 2");
    try {
        geometry().validate();
        distill.validate();
    } catch (const InvalidArgument& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
}

nlohmann::json PipelineConfig::to_json() const {
    nlohmann::json j;
    for (const auto& f : schema()) j[f.section][f.key] = f.get(*this);
    return j;
}

PipelineConfig parse_config(const std::string& ini_text) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(ini_text);
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    std::map<std::string, const Field*> index;
    std::set<std::string> sections;
    for (const auto& f : schema()) {
        index[f.section + "." + f.key] = &f;
        sections.insert(f.section);
    }
    PipelineConfig cfg;
    for (const auto& [sec, body] : tree) {
        if (!sections.count(sec)) {
            if (body.empty()) throw FormatError("config: top-level key '" + sec + "' outside any section");
            throw FormatError("config: unknown section [" + sec + "]");
        }
        for (const auto& [key, val] : body) {
            const auto where = sec + "." + key;
            const auto it = index.find(where);
            if (it == index.end()) throw FormatError("config: unknown key " + where);
            it->second->set(cfg, val.get_value<std::string>(), where);
        }
    }
    cfg.propagate();
    cfg.validate();
    return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string config_to_ini(const PipelineConfig& cfg) {
    std::string out, current;
    for (const auto& f : schema()) {
        if (f.section != current) {
            out += (out.empty() ? "" : "\n") + std::string("[") + f.section + "]\n";
            current = f.section;
        }
        out += f.key + " = " + f.get(cfg) + "\n";
    }
    return out;
}

std::string config_hash(const PipelineConfig& cfg) { return hex64(fnv1a64(config_to_ini(cfg))); }

}  // namespace keyauth
