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

#include "keyauth/stegonet.hpp"

#include <cmath>

#include "keyauth/checkpoint.hpp"
#include "keyauth/error.hpp"

namespace keyauth {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

namespace {

nn::Sequential conv_block(int in, int out) {
    return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)),
                          nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.01)), nn::BatchNorm2d(out));
}

nn::Conv2d plain_conv(int in, int out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)); }

torch::Tensor as_batch(const torch::Tensor& images) { return images.dim() == 3 ? images.unsqueeze(0) : images; }

void check_images(const CodecGeometry& g, const torch::Tensor& images, const char* what) {
    if (images.dim() != 4 || images.size(1) != g.image_channels || images.size(2) != g.height ||
        images.size(3) != g.width)
        throw InvalidArgument(std::string(what) + ": expected images of shape [N," +
                              std::to_string(g.image_channels) + "," + std::to_string(g.height) + "," +
                              std::to_string(g.width) + "]");
}

// Mode flip that restores the previous training flag on scope exit.
class EvalScope {
public:
    explicit EvalScope(nn::Module& m) : m_(m), was_(m.is_training()) { m_.eval(); }
    ~EvalScope() { m_.train(was_); }

private:
    nn::Module& m_;
    bool was_;
};

}  // namespace

void CodecGeometry::validate() const {
    if (image_channels < 1 || height < 1 || width < 1 || key_channels < 1 || key_side < 1 || hidden < 1)
        throw InvalidArgument("codec geometry: all sizes must be positive");
    if (height % key_side != 0 || width % key_side != 0)
        throw InvalidArgument("codec geometry: key side must divide the image height and width");
}

nlohmann::json CodecGeometry::to_json() const {
    return {{"image_channels", image_channels}, {"height", height}, {"width", width},
            {"key_channels", key_channels},     {"key_side", key_side}, {"hidden", hidden}};
}

CodecGeometry CodecGeometry::from_json(const nlohmann::json& j) {
    CodecGeometry g;
    g.image_channels = j.at("image_channels").get<int>();
    g.height = j.at("height").get<int>();
    g.width = j.at("width").get<int>();
    g.key_channels = j.at("key_channels").get<int>();
    g.key_side = j.at("key_side").get<int>();
    g.hidden = j.at("hidden").get<int>();
    g.validate();
    return g;
}

StegoEncoderImpl::StegoEncoderImpl(CodecGeometry g) : g_(g) {
    g_.validate();
    reset();
}

void StegoEncoderImpl::reset() {
    const int h = g_.hidden, c = g_.key_channels;
    features_ = register_module("features", conv_block(g_.image_channels, h));
    dense1_ = register_module("dense1", conv_block(h + c, h));
    dense2_ = register_module("dense2", conv_block(2 * h + c, h));
    out_ = register_module("out", plain_conv(3 * h + c, g_.image_channels));
}

torch::Tensor StegoEncoderImpl::forward(const torch::Tensor& cover, const torch::Tensor& message) {
    const auto a = features_->forward(cover);
    const auto b = dense1_->forward(torch::cat({a, message}, 1));
    const auto c = dense2_->forward(torch::cat({a, b, message}, 1));
    const auto residual = out_->forward(torch::cat({a, b, c, message}, 1));
    return (cover + residual).clamp(0.0, 1.0);
}

StegoDecoderImpl::StegoDecoderImpl(CodecGeometry g) : g_(g) {
    g_.validate();
    reset();
}

void StegoDecoderImpl::reset() {
    const int h = g_.hidden;
    a_ = register_module("a", conv_block(g_.image_channels, h));
    b_ = register_module("b", conv_block(h, h));
    c_ = register_module("c", conv_block(2 * h, h));
    out_ = register_module("out", plain_conv(3 * h, g_.key_channels));
}

torch::Tensor StegoDecoderImpl::forward(const torch::Tensor& stego) {
    const auto a = a_->forward(stego);
    const auto b = b_->forward(a);
    const auto c = c_->forward(torch::cat({a, b}, 1));
    return out_->forward(torch::cat({a, b, c}, 1));
}

StegoCriticImpl::StegoCriticImpl(CodecGeometry g) : g_(g) {
    g_.validate();
    reset();
}

void StegoCriticImpl::reset() {
    const int h = g_.hidden;
    const auto act = nn::LeakyReLUOptions().negative_slope(0.01);
    net_ = register_module("net", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(g_.image_channels, h, 3).padding(1)),
                                                 nn::LeakyReLU(act), nn::BatchNorm2d(h),
                                                 nn::Conv2d(nn::Conv2dOptions(h, h, 3).padding(1)),
                                                 nn::LeakyReLU(act), nn::BatchNorm2d(h), plain_conv(h, 1)));
}

torch::Tensor StegoCriticImpl::forward(const torch::Tensor& image) { return net_->forward(image).mean({1, 2, 3}); }

StegoCodec::StegoCodec(CodecGeometry g, std::uint64_t seed) : geometry(g), encoder(nullptr), decoder(nullptr), critic(nullptr) {
    geometry.validate();
    torch::manual_seed(seed);
    encoder = StegoEncoder(geometry);
    decoder = StegoDecoder(geometry);
    critic = StegoCritic(geometry);
}

void StegoCodec::eval() {
    encoder->eval();
    decoder->eval();
    critic->eval();
}

StegoCodec StegoCodec::clone() const {
    StegoCodec c(geometry);
    c.encoder = clone_module(encoder);
    c.decoder = clone_module(decoder);
    c.critic = clone_module(critic);
    return c;
}

torch::Tensor expanded_key_tensor(const ExpandedKey& key) {
    auto t = torch::empty({key.channels, key.height, key.width});
    auto* p = t.data_ptr<float>();
    for (std::size_t i = 0; i < key.bits.size(); ++i) p[i] = key.bits[i] ? 1.0f : 0.0f;
    return t;
}

Plane tensor_to_plane(const torch::Tensor& t) {
    if (t.dim() != 3) throw InvalidArgument("tensor_to_plane: expected [c,h,w]");
    auto c = t.detach().to(torch::kFloat32).contiguous();
    Plane p(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)), static_cast<int>(c.size(2)));
    std::copy(c.data_ptr<float>(), c.data_ptr<float>() + c.numel(), p.values.begin());
    return p;
}

torch::Tensor random_tiled_messages(int64_t n, const CodecGeometry& g, torch::Generator& gen) {
    auto keys = torch::rand({n, g.key_channels, g.key_side, g.key_side}, gen).lt(0.5).to(torch::kFloat32);
    return keys.repeat({1, 1, g.height / g.key_side, g.width / g.key_side});
}

torch::Tensor encode_messages(StegoCodec& codec, const torch::Tensor& images, const torch::Tensor& messages) {
    const auto x = as_batch(images);
    check_images(codec.geometry, x, "encode");
    const auto& g = codec.geometry;
    if (messages.dim() != 4 || messages.size(0) != x.size(0) || messages.size(1) != g.key_channels ||
        messages.size(2) != g.height || messages.size(3) != g.width)
        throw InvalidArgument("encode: message shape does not match the codec geometry");
    torch::NoGradGuard guard;
    EvalScope scope(*codec.encoder);
    auto out = codec.encoder->forward(x, messages);
    return images.dim() == 3 ? out.squeeze(0) : out;
}

torch::Tensor encode(StegoCodec& codec, const torch::Tensor& images, const ExpandedKey& key) {
    const auto& g = codec.geometry;
    if (key.channels != g.key_channels || key.height != g.height || key.width != g.width)
        throw InvalidArgument("encode: expanded key shape does not match the codec geometry");
    const auto x = as_batch(images);
    check_images(g, x, "encode");
    torch::NoGradGuard guard;
    EvalScope scope(*codec.encoder);
    auto msg = expanded_key_tensor(key).unsqueeze(0).expand({x.size(0), -1, -1, -1});
    std::vector<torch::Tensor> parts;
    for (int64_t b = 0; b < x.size(0); b += 256) {
        const auto e = std::min<int64_t>(b + 256, x.size(0));
        parts.push_back(codec.encoder->forward(x.slice(0, b, e), msg.slice(0, b, e)));
    }
    auto out = torch::cat(parts);
    return images.dim() == 3 ? out.squeeze(0) : out;
}

torch::Tensor decode(StegoCodec& codec, const torch::Tensor& stego) {
    const auto x = as_batch(stego);
    check_images(codec.geometry, x, "decode");
    torch::NoGradGuard guard;
    EvalScope scope(*codec.decoder);
    std::vector<torch::Tensor> parts;
    for (int64_t b = 0; b < x.size(0); b += 256)
        parts.push_back(torch::sigmoid(codec.decoder->forward(x.slice(0, b, std::min<int64_t>(b + 256, x.size(0))))));
    auto out = torch::cat(parts);
    return stego.dim() == 3 ? out.squeeze(0) : out;
}

std::vector<UserKey> extract_keys(StegoCodec& codec, const torch::Tensor& stego, float threshold) {
    const auto planes = as_batch(decode(codec, stego));
    std::vector<UserKey> keys;
    keys.reserve(static_cast<std::size_t>(planes.size(0)));
    for (int64_t i = 0; i < planes.size(0); ++i)
        keys.push_back(extract_key(tensor_to_plane(planes[i]), codec.geometry.key_side, threshold));
    return keys;
}

CodecLosses codec_losses(StegoCodec& codec, const torch::Tensor& cover, const torch::Tensor& stego,
                         const torch::Tensor& messages) {
    return {F::binary_cross_entropy_with_logits(codec.decoder->forward(stego), messages), F::mse_loss(stego, cover),
            codec.critic->forward(stego).mean()};
}

double bit_accuracy(StegoCodec& codec, const torch::Tensor& images, std::uint64_t seed) {
    auto gen = make_generator(seed);
    const auto x = as_batch(images);
    const auto msg = random_tiled_messages(x.size(0), codec.geometry, gen);
    const auto decoded = decode(codec, encode_messages(codec, x, msg));
    return decoded.ge(0.5).to(torch::kFloat32).eq(msg).to(torch::kFloat32).mean().item<double>();
}

StegoCodec train_codec(const torch::Tensor& images, const CodecGeometry& geometry, const CodecTrainConfig& cfg,
                       const MetricsSink& sink) {
    if (images.dim() != 4 || images.size(0) == 0) throw InvalidArgument("train_codec: empty training set");
    if (cfg.epochs < 1 || cfg.batch < 1) throw InvalidArgument("train_codec: epochs and batch must be positive");
    StegoCodec codec(geometry, cfg.seed);
    check_images(codec.geometry, images, "train_codec");
    auto gen = make_generator(derive_seed(cfg.seed, 1));

    std::vector<torch::Tensor> coder_params = codec.encoder->parameters();
    for (auto& p : codec.decoder->parameters()) coder_params.push_back(p);
    torch::optim::Adam opt(coder_params, torch::optim::AdamOptions(cfg.lr));
    torch::optim::Adam critic_opt(codec.critic->parameters(), torch::optim::AdamOptions(cfg.critic_lr));

    const int64_t n = images.size(0);
    const long steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const long total = steps_per_epoch * cfg.epochs;
    // Constant rate, cosine decay over the final stretch to settle the decoder.
    const long decay_from = static_cast<long>(total * (1.0 - cfg.decay_fraction));
    auto lr_at = [&](long step) {
        if (step < decay_from || total == decay_from) return cfg.lr;
        const double u = static_cast<double>(step - decay_from) / static_cast<double>(total - decay_from);
        return cfg.lr * (0.02 + 0.98 * 0.5 * (1.0 + std::cos(M_PI * u)));
    };

    const auto probe = images.slice(0, 0, std::min<int64_t>(n, 256));
    auto stable = std::make_shared<Checkpoint>();
    auto snapshot = [&](long step) {
        auto ck = std::make_shared<Checkpoint>();
        ck->meta = {{"kind", "codec"}, {"geometry", codec.geometry.to_json()}, {"step", step}};
        ck->add_section("encoder", module_state(*codec.encoder));
        ck->add_section("decoder", module_state(*codec.decoder));
        ck->add_section("critic", module_state(*codec.critic));
        stable = ck;
    };
    snapshot(0);

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        codec.encoder->train();
        codec.decoder->train();
        codec.critic->train();
        CodecEpochStats stats;
        for (const auto& idx : shuffled_batches(n, cfg.batch, gen)) {
            set_learning_rate(opt, lr_at(step));
            const auto x = images.index_select(0, idx);
            const auto msg = cfg.tiled_messages
                                 ? random_tiled_messages(x.size(0), codec.geometry, gen)
                                 : torch::rand({x.size(0), geometry.key_channels, geometry.height, geometry.width}, gen)
                                       .lt(0.5)
                                       .to(torch::kFloat32);
            for (int k = 0; k < cfg.critic_steps; ++k) {
                torch::Tensor fake;
                {
                    torch::NoGradGuard ng;
                    fake = codec.encoder->forward(x, msg);
                }
                // Critic maximizes score(real) - score(stego); minimize the negation.
                const auto critic_loss = codec.critic->forward(fake).mean() - codec.critic->forward(x).mean();
                critic_opt.zero_grad();
                critic_loss.backward();
                critic_opt.step();
                torch::NoGradGuard ng;
                for (auto& p : codec.critic->parameters()) p.clamp_(-cfg.critic_clip, cfg.critic_clip);
            }
            const auto stego = codec.encoder->forward(x, msg);
            const auto logits = codec.decoder->forward(stego);
            const auto ld = F::binary_cross_entropy_with_logits(logits, msg);
            const auto ls = F::mse_loss(stego, x);
            const auto lr = codec.critic->forward(stego).mean();
            const auto loss = cfg.weight_decode * ld + cfg.weight_similarity * ls + cfg.weight_realness * lr;
            ++step;
            if (!std::isfinite(loss.item<double>()))
                throw TrainingFailure("codec training diverged (non-finite loss) at step " + std::to_string(step),
                                      stable->meta.value("step", 0L), stable);
            opt.zero_grad();
            loss.backward();
            opt.step();
            stats.decode_loss += ld.item<double>() / steps_per_epoch;
            stats.similarity_loss += ls.item<double>() / steps_per_epoch;
            stats.realness += lr.item<double>() / steps_per_epoch;
        }
        snapshot(step);
        stats.bit_accuracy = bit_accuracy(codec, probe, derive_seed(cfg.seed, 2));
        if (sink)
            sink(epoch, {{"decode_loss", stats.decode_loss},
                         {"similarity_loss", stats.similarity_loss},
                         {"realness", stats.realness},
                         {"bit_accuracy", stats.bit_accuracy}});
    }
    codec.eval();
    return codec;
}

torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b) {
    const auto x = as_batch(a).to(torch::kFloat64), y = as_batch(b).to(torch::kFloat64);
    if (x.sizes() != y.sizes()) throw InvalidArgument("ssim: image shapes differ");
    const int64_t win = 11;
    if (x.size(2) < win || x.size(3) < win) throw InvalidArgument("ssim: images smaller than the 11x11 window");
    auto coords = torch::arange(win, torch::kFloat64) - (win - 1) / 2.0;
    auto g = torch::exp(-coords.pow(2) / (2.0 * 1.5 * 1.5));
    g = g / g.sum();
    const int64_t ch = x.size(1);
    const auto w = torch::outer(g, g).expand({ch, 1, win, win}).contiguous();
    auto filt = [&](const torch::Tensor& t) { return F::conv2d(t, w, F::Conv2dFuncOptions().groups(ch)); };
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const auto mx = filt(x), my = filt(y);
    const auto sxx = filt(x * x) - mx * mx, syy = filt(y * y) - my * my, sxy = filt(x * y) - mx * my;
    const auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    return map.mean({1, 2, 3});
}

torch::Tensor psnr_per_image(const torch::Tensor& a, const torch::Tensor& b) {
    const auto x = as_batch(a).to(torch::kFloat64), y = as_batch(b).to(torch::kFloat64);
    if (x.sizes() != y.sizes()) throw InvalidArgument("psnr: image shapes differ");
    const auto mse = (x - y).pow(2).mean({1, 2, 3});
    auto out = -10.0 * torch::log10(mse);
    return torch::where(mse.eq(0), torch::full_like(out, IqaReport::kIdenticalPsnr), out);
}

IqaReport iqa(const torch::Tensor& cover, const torch::Tensor& stego) {
    if (as_batch(cover).size(0) != as_batch(stego).size(0)) throw InvalidArgument("iqa: batch lengths differ");
    IqaReport r;
    auto summarize = [](const torch::Tensor& v) {
        MeanStd m;
        if (v.numel() == 0) return m;
        m.mean = v.mean().item<double>();
        m.std = v.numel() > 1 ? v.std(/*unbiased=*/false).item<double>() : 0.0;
        return m;
    };
    r.ssim = summarize(ssim_per_image(cover, stego));
    const auto p = psnr_per_image(cover, stego);
    const auto finite = torch::isfinite(p);
    r.identical_pairs = static_cast<int>(p.numel() - finite.sum().item<int64_t>());
    if (r.identical_pairs == p.numel()) {
        r.psnr = {IqaReport::kIdenticalPsnr, 0.0};
    } else {
        r.psnr = summarize(p.masked_select(finite));
    }
    return r;
}

void save_codec(const std::filesystem::path& path, const StegoCodec& codec, const nlohmann::json& extra) {
    Checkpoint ck;
    ck.meta = {{"kind", "codec"}, {"geometry", codec.geometry.to_json()}};
    if (!extra.is_null()) ck.meta["extra"] = extra;
    ck.add_section("encoder", module_state(*codec.encoder));
    ck.add_section("decoder", module_state(*codec.decoder));
    ck.add_section("critic", module_state(*codec.critic));
    save_checkpoint(path, ck);
}

StegoCodec codec_from_checkpoint(const Checkpoint& ck) {
    if (ck.meta.value("kind", "") != "codec") throw FormatError("checkpoint is not a codec");
    StegoCodec codec(CodecGeometry::from_json(ck.meta.at("geometry")));
    load_module_state(*codec.encoder, ck.section("encoder"));
    load_module_state(*codec.decoder, ck.section("decoder"));
    load_module_state(*codec.critic, ck.section("critic"));
    codec.eval();
    return codec;
}

StegoCodec load_codec(const std::filesystem::path& path) { return codec_from_checkpoint(load_checkpoint(path)); }

}  // namespace keyauth
