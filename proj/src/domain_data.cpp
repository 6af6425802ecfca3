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

#include "keyauth/domain_data.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#ifdef KEYAUTH_HAVE_OPENCV
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#endif

#include "keyauth/checkpoint.hpp"
#include "keyauth/error.hpp"
#include "keyauth/training.hpp"

namespace keyauth {

Dataset Dataset::subset(const torch::Tensor& index) const {
    return {images.index_select(0, index), labels.index_select(0, index), num_classes};
}

Dataset Dataset::slice(int64_t begin, int64_t end) const {
    return {images.slice(0, begin, end), labels.slice(0, begin, end), num_classes};
}

Dataset Dataset::sample_fraction(double fraction, std::uint64_t seed) const {
    if (fraction <= 0.0 || fraction > 1.0) throw InvalidArgument("sample_fraction: fraction must be in (0, 1]");
    auto gen = make_generator(seed);
    const auto perm = torch::randperm(size(), gen, torch::TensorOptions().dtype(torch::kInt64));
    const auto keep = std::max<int64_t>(1, static_cast<int64_t>(std::llround(fraction * size())));
    return subset(perm.slice(0, 0, keep));
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
    Checkpoint ck;
    ck.meta = {{"kind", "dataset"}, {"num_classes", ds.num_classes}};
    ck.arrays = {{"images", ds.images.to(torch::kFloat32)}, {"labels", ds.labels.to(torch::kInt64)}};
    save_checkpoint(path, ck);
}

Dataset load_dataset(const std::filesystem::path& path) {
    const auto ck = load_checkpoint(path);
    if (ck.meta.value("kind", "") != "dataset") throw FormatError(path.string() + ": not a dataset file");
    const auto* im = ck.find("images");
    const auto* lb = ck.find("labels");
    if (!im || !lb || im->dim() != 4 || lb->dim() != 1 || im->size(0) != lb->size(0))
        throw FormatError(path.string() + ": dataset arrays missing or inconsistent");
    return {*im, *lb, ck.meta.at("num_classes").get<int>()};
}

bool image_folder_supported() noexcept {
#ifdef KEYAUTH_HAVE_OPENCV
    return true;
#else
    return false;
#endif
}

Dataset load_image_folder(const std::filesystem::path& root, int height, int width) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw InvalidArgument(root.string() + " is not a directory");
#ifdef KEYAUTH_HAVE_OPENCV
    std::vector<fs::path> classes;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) classes.push_back(e.path());
    std::sort(classes.begin(), classes.end());
    if (classes.size() < 2) throw InvalidArgument(root.string() + ": need at least two class folders");
    std::vector<torch::Tensor> ims;
    std::vector<int64_t> labels;
    for (std::size_t c = 0; c < classes.size(); ++c) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(classes[c]))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            cv::Mat img = cv::imread(f.string(), cv::IMREAD_COLOR);
            if (img.empty()) continue;
            cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
            cv::resize(img, img, cv::Size(width, height), 0, 0, cv::INTER_AREA);
            img.convertTo(img, CV_32FC3, 1.0 / 255.0);
            auto t = torch::from_blob(img.data, {height, width, 3}, torch::kFloat32).permute({2, 0, 1}).clone();
            ims.push_back(t);
            labels.push_back(static_cast<int64_t>(c));
        }
    }
    if (ims.empty()) throw InvalidArgument(root.string() + ": no readable images");
    return {torch::stack(ims), torch::tensor(labels, torch::kInt64), static_cast<int>(classes.size())};
#else
    (void)height;
    (void)width;
    throw InvalidArgument("image folder ingestion needs a build with OpenCV");
#endif
}

namespace {

bool shape_mask(int cls, double u, double v) {
    const double r = std::sqrt(u * u + v * v);
    switch (cls) {
        case 0: return r < 1.0;
        case 1: return std::abs(u) < 0.85 && std::abs(v) < 0.85;
        case 2: return v < 0.8 && v > -0.8 && std::abs(u) < (0.8 - v) * 0.55;
        case 3: return (std::abs(u) < 0.3 || std::abs(v) < 0.3) && r < 1.1;
        case 4: return r < 1.0 && r > 0.6;
        case 5: return std::abs(u) + std::abs(v) < 1.0;
        case 6: return (std::abs(u - v) < 0.35 || std::abs(u + v) < 0.35) && r < 1.1;
        case 7: return (std::abs(v - 0.45) < 0.22 || std::abs(v + 0.45) < 0.22) && std::abs(u) < 0.9;
        case 8: return std::cos(u * 3.0 * M_PI) > 0.0 && r < 1.0;
        default:
            return static_cast<long>(std::floor(u * 2) + std::floor(v * 2)) % 2 == 0 && std::abs(u) < 1.0 &&
                   std::abs(v) < 1.0;
    }
}

}  // namespace

Dataset make_toy_dataset(int64_t n, std::uint64_t seed, int size) {
    if (n < 0 || size < 8) throw InvalidArgument("make_toy_dataset: bad size");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };
    auto images = torch::empty({n, 3, size, size});
    auto labels = torch::empty({n}, torch::kInt64);
    float* px = images.data_ptr<float>();
    const double H = size, scale = size / 32.0;
    for (int64_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(rng() % 10);
        labels[i] = cls;
        double bg[3], gx[3], gy[3], col[3], blob[3];
        for (int c = 0; c < 3; ++c) bg[c] = uni(0.15, 0.85);
        for (int c = 0; c < 3; ++c) {
            gx[c] = 0.15 * normal(rng);
            gy[c] = 0.15 * normal(rng);
        }
        const double cx = H / 2 + uni(-6, 6) * scale, cy = H / 2 + uni(-6, 6) * scale;
        const double R = uni(6, 11) * scale, th = uni(-0.4, 0.4);
        for (;;) {
            double gap = 0;
            for (int c = 0; c < 3; ++c) {
                col[c] = unit(rng);
                gap = std::max(gap, std::abs(col[c] - bg[c]));
            }
            if (gap >= 0.35) break;
        }
        const double dx = uni(0, H), dy = uni(0, H), dr = uni(2, 4) * scale;
        for (int c = 0; c < 3; ++c) blob[c] = unit(rng);
        const double ct = std::cos(th), sn = std::sin(th);
        float* img = px + i * 3 * size * size;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double u = ((x - cx) * ct + (y - cy) * sn) / R;
                const double v = (-(x - cx) * sn + (y - cy) * ct) / R;
                const bool in_shape = shape_mask(cls, u, v);
                const bool in_blob = (x - dx) * (x - dx) + (y - dy) * (y - dy) < dr * dr;
                for (int c = 0; c < 3; ++c) {
                    double val = bg[c] + gx[c] * (x / H - 0.5) + gy[c] * (y / H - 0.5);
                    if (in_shape) val = col[c];
                    if (in_blob) val = blob[c];
                    val += 0.06 * normal(rng);
                    img[(c * size + y) * size + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
                }
            }
    }
    return {images, labels, 10};
}

Dataset load_named_dataset(const std::string& source, int64_t n, std::uint64_t seed, int size) {
    if (source == "toy") return make_toy_dataset(n, seed, size);
    const std::filesystem::path p(source);
    Dataset ds = std::filesystem::is_directory(p) ? load_image_folder(p, size, size) : load_dataset(p);
    if (n > 0 && n < ds.size()) ds = ds.sample_fraction(static_cast<double>(n) / ds.size(), seed);
    return ds;
}

std::string domain_name(Domain d) {
    switch (d) {
        case Domain::authorized: return "authorized";
        case Domain::benign: return "benign";
        case Domain::noise: return "noise";
    }
    throw InvalidArgument("unknown domain");
}

Domain parse_domain(const std::string& name) {
    if (name == "authorized") return Domain::authorized;
    if (name == "benign") return Domain::benign;
    if (name == "noise") return Domain::noise;
    throw InvalidArgument("unknown domain tag '" + name + "'");
}

std::uint64_t accepted_noise_seed(const UserKey& owner, std::uint64_t seed) {
    if (owner.bits.empty()) throw InvalidArgument("owner key is empty");
    for (std::uint64_t attempt = 0;; ++attempt) {
        const auto s = attempt == 0 ? seed : derive_seed(seed, attempt);
        if (!generate_key("noise", owner.side, owner.channels, s).same_bits(owner)) return s;
    }
}

DomainTriple::DomainTriple(Dataset benign, UserKey owner_key, std::shared_ptr<StegoCodec> codec, std::uint64_t seed)
    : benign_(std::move(benign)), key_(std::move(owner_key)), codec_(std::move(codec)) {
    if (!codec_) throw InvalidArgument("domain triple needs a codec");
    const auto& g = codec_->geometry;
    if (benign_.size() == 0) throw InvalidArgument("domain triple: empty dataset");
    if (benign_.images.dim() != 4 || benign_.images.size(1) != g.image_channels || benign_.images.size(2) != g.height ||
        benign_.images.size(3) != g.width)
        throw InvalidArgument("domain triple: image geometry does not match the codec");
    if (key_.side != g.key_side || key_.channels != g.key_channels)
        throw InvalidArgument("domain triple: key shape does not match the codec");
    noise_seeds_.resize(static_cast<std::size_t>(size()));
    for (int64_t i = 0; i < size(); ++i)
        noise_seeds_[static_cast<std::size_t>(i)] = accepted_noise_seed(key_, derive_seed(seed, static_cast<std::uint64_t>(i)));
    for (int d = 0; d < 2; ++d) {
        cache_[d] = torch::empty_like(benign_.images);
        ready_[d].assign(static_cast<std::size_t>(size()), 0);
    }
}

std::uint64_t DomainTriple::noise_seed(int64_t i) const { return noise_seeds_.at(static_cast<std::size_t>(i)); }

UserKey DomainTriple::noise_key(int64_t i) const { return generate_key("noise", key_.side, key_.channels, noise_seed(i)); }

void DomainTriple::fill(Domain d, const std::vector<int64_t>& missing) {
    const int slot = d == Domain::authorized ? 0 : 1;
    const auto& g = codec_->geometry;
    for (std::size_t b = 0; b < missing.size(); b += 256) {
        const auto e = std::min(missing.size(), b + 256);
        std::vector<int64_t> part(missing.begin() + static_cast<long>(b), missing.begin() + static_cast<long>(e));
        const auto idx = torch::tensor(part, torch::kInt64);
        const auto x = benign_.images.index_select(0, idx);
        torch::Tensor out;
        if (d == Domain::authorized) {
            out = encode(*codec_, x, expand_key(key_, g.height, g.width));
        } else {
            std::vector<torch::Tensor> msgs;
            for (auto i : part) msgs.push_back(expanded_key_tensor(expand_key(noise_key(i), g.height, g.width)));
            out = encode_messages(*codec_, x, torch::stack(msgs));
        }
        cache_[slot].index_copy_(0, idx, out);
        for (auto i : part) ready_[slot][static_cast<std::size_t>(i)] = 1;
    }
}

torch::Tensor DomainTriple::images(Domain d, const torch::Tensor& index) {
    const auto idx = index.to(torch::kInt64).contiguous();
    if (d == Domain::benign) return benign_.images.index_select(0, idx);
    const int slot = d == Domain::authorized ? 0 : 1;
    std::lock_guard lock(mu_);
    std::vector<int64_t> missing;
    const auto* p = idx.data_ptr<int64_t>();
    for (int64_t k = 0; k < idx.numel(); ++k) {
        if (p[k] < 0 || p[k] >= size()) throw InvalidArgument("domain index out of range");
        if (!ready_[slot][static_cast<std::size_t>(p[k])]) missing.push_back(p[k]);
    }
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    if (!missing.empty()) fill(d, missing);
    return cache_[slot].index_select(0, idx);
}

torch::Tensor DomainTriple::all(Domain d) { return images(d, torch::arange(size(), torch::kInt64)); }

Dataset DomainTriple::dataset(Domain d) { return {all(d), benign_.labels, benign_.num_classes}; }

TaggedBatch DomainTriple::mixed(const torch::Tensor& w_index) {
    const auto w = w_index.to(torch::kInt64);
    if (w.numel() > 0 && (w.min().item<int64_t>() < 0 || w.max().item<int64_t>() >= mixed_size()))
        throw InvalidArgument("mixed index out of range");
    const auto tags = torch::div(w, size(), "floor");
    const auto sample = w - tags * size();
    auto out = torch::empty({w.numel(), benign_.images.size(1), benign_.images.size(2), benign_.images.size(3)});
    for (int d = 0; d < 3; ++d) {
        const auto sel = tags.eq(d).nonzero().squeeze(1);
        if (sel.numel() == 0) continue;
        out.index_copy_(0, sel, images(static_cast<Domain>(d), sample.index_select(0, sel)));
    }
    return {out, benign_.labels.index_select(0, sample), tags};
}

torch::Tensor DomainTriple::images_augmented(Domain d, const torch::Tensor& index, const AugmentPolicy& policy,
                                             torch::Generator& gen) {
    const auto idx = index.to(torch::kInt64).contiguous();
    const auto covers = benign_.images.index_select(0, idx);
    const auto aug = augment(covers, policy, gen);
    if (d == Domain::benign || idx.numel() == 0) return aug;
    auto out = images(d, idx).clone();
    const auto changed = (aug - covers).abs().flatten(1).amax(1).gt(0).nonzero().squeeze(1);
    if (changed.numel() == 0) return out;
    const auto& g = codec_->geometry;
    const auto x = aug.index_select(0, changed);
    torch::Tensor enc;
    if (d == Domain::authorized) {
        enc = encode(*codec_, x, expand_key(key_, g.height, g.width));
    } else {
        const auto sel = idx.index_select(0, changed);
        std::vector<torch::Tensor> msgs;
        for (int64_t k = 0; k < sel.numel(); ++k)
            msgs.push_back(expanded_key_tensor(expand_key(noise_key(sel[k].item<int64_t>()), g.height, g.width)));
        enc = encode_messages(*codec_, x, torch::stack(msgs));
    }
    out.index_copy_(0, changed, enc);
    return out;
}

TaggedBatch DomainTriple::mixed_augmented(const torch::Tensor& w_index, const AugmentPolicy& policy,
                                          torch::Generator& gen) {
    auto batch = mixed(w_index);
    if (policy.empty()) return batch;
    const auto w = w_index.to(torch::kInt64);
    const auto sample = w - batch.tags * size();
    for (int d = 0; d < 3; ++d) {
        const auto sel = batch.tags.eq(d).nonzero().squeeze(1);
        if (sel.numel() == 0) continue;
        batch.images.index_copy_(0, sel, images_augmented(static_cast<Domain>(d), sample.index_select(0, sel), policy, gen));
    }
    return batch;
}

int64_t DomainTriple::cached(Domain d) const {
    if (d == Domain::benign) return size();
    std::lock_guard lock(mu_);
    const auto& r = ready_[d == Domain::authorized ? 0 : 1];
    return std::count(r.begin(), r.end(), 1);
}

void validate_policy(const AugmentPolicy& policy) {
    for (const auto& [name, mag] : policy) {
        if (name != "crop" && name != "hflip" && name != "rotate" && name != "erase")
            throw InvalidArgument("unknown augmentation '" + name + "'");
        if (!(mag >= 0.0)) throw InvalidArgument("augmentation magnitude must be non-negative: " + name);
        if ((name == "hflip" || name == "erase") && mag > 1.0)
            throw InvalidArgument(name + " magnitude is a probability");
    }
}

torch::Tensor hflip(const torch::Tensor& batch) { return batch.flip({-1}); }

torch::Tensor augment(const torch::Tensor& batch, const AugmentPolicy& policy, torch::Generator& gen) {
    validate_policy(policy);
    if (policy.empty() || batch.size(0) == 0) return batch;
    auto x = batch.clone();
    const int64_t n = x.size(0), h = x.size(2), w = x.size(3);
    auto draw = [&](int64_t k) { return torch::rand({k}, gen); };
    if (auto it = policy.find("crop"); it != policy.end() && it->second >= 1.0) {
        const auto pad = static_cast<int64_t>(it->second);
        const auto padded = torch::constant_pad_nd(x, {pad, pad, pad, pad}, 0.0);
        const auto offs = torch::randint(0, 2 * pad + 1, {n, 2}, gen, torch::TensorOptions().dtype(torch::kInt64));
        for (int64_t i = 0; i < n; ++i) {
            const auto oy = offs[i][0].item<int64_t>(), ox = offs[i][1].item<int64_t>();
            x[i].copy_(padded[i].slice(1, oy, oy + h).slice(2, ox, ox + w));
        }
    }
    if (auto it = policy.find("hflip"); it != policy.end() && it->second > 0.0) {
        const auto sel = draw(n).lt(it->second).nonzero().squeeze(1);
        if (sel.numel() > 0) x.index_copy_(0, sel, hflip(x.index_select(0, sel)));
    }
    if (auto it = policy.find("rotate"); it != policy.end() && it->second > 0.0) {
        const auto ang = (draw(n) * 2 - 1) * (it->second * M_PI / 180.0);
        const auto c = torch::cos(ang), s = torch::sin(ang), z = torch::zeros_like(ang);
        const auto theta = torch::stack({torch::stack({c, -s, z}, 1), torch::stack({s, c, z}, 1)}, 1);
        const auto grid = torch::nn::functional::affine_grid(theta, {n, x.size(1), h, w}, false);
        x = torch::nn::functional::grid_sample(
            x, grid, torch::nn::functional::GridSampleFuncOptions().padding_mode(torch::kBorder).align_corners(false));
    }
    if (auto it = policy.find("erase"); it != policy.end() && it->second > 0.0) {
        const auto hit = draw(n).lt(it->second);
        for (int64_t i = 0; i < n; ++i) {
            if (!hit[i].item<bool>()) continue;
            const auto r = draw(4);
            const double area = (0.02 + 0.18 * r[0].item<double>()) * h * w;
            const double aspect = std::exp(std::log(0.3) + (std::log(3.3) - std::log(0.3)) * r[1].item<double>());
            const auto eh = std::clamp<int64_t>(std::llround(std::sqrt(area * aspect)), 1, h);
            const auto ew = std::clamp<int64_t>(std::llround(std::sqrt(area / aspect)), 1, w);
            const auto y0 = static_cast<int64_t>(r[2].item<double>() * (h - eh + 1));
            const auto x0 = static_cast<int64_t>(r[3].item<double>() * (w - ew + 1));
            x[i].slice(1, y0, y0 + eh).slice(2, x0, x0 + ew).copy_(torch::rand({x.size(1), eh, ew}, gen));
        }
    }
    return x;
}

}  // namespace keyauth
