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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "keyauth/checkpoint.hpp"
#include "keyauth/distill.hpp"
#include "keyauth/error.hpp"

using namespace keyauth;

namespace {

std::vector<torch::Tensor> layer_feats(int64_t n, std::uint64_t seed) {
    auto gen = make_generator(seed);
    std::vector<torch::Tensor> out;
    for (int c : {16, 32, 64, 128}) out.push_back(torch::randn({n, c, 2, 2}, gen));
    return out;
}

std::vector<CrdCritic> critics_for(const std::vector<torch::Tensor>& f, int proj = 128) {
    torch::manual_seed(5);
    std::vector<CrdCritic> out;
    for (const auto& t : f) out.emplace_back(t.size(1), t.size(1), proj);
    return out;
}

}  // namespace

TEST(KlLoss, IdenticalLogitsGiveZero) {
    const auto t = torch::randn({8, 10});
    EXPECT_NEAR(kl_loss(t, t, 4.0).item<double>(), 0.0, 1e-7);
}

TEST(KlLoss, HandEvaluatedOneHotCase) {
    // teacher softmax [e^10, 1, 1] / Z, student uniform, direct summation.
    const double z = std::exp(10.0) + 2.0;
    const double p[3] = {std::exp(10.0) / z, 1.0 / z, 1.0 / z};
    double expected = 0;
    for (double pi : p) expected += pi * std::log(pi / (1.0 / 3.0));
    const auto s = torch::tensor({{0.0, 0.0, 0.0}}, torch::kFloat64);
    const auto t = torch::tensor({{10.0, 0.0, 0.0}}, torch::kFloat64);
    EXPECT_NEAR(kl_loss(s, t, 1.0).item<double>(), expected, 1e-9);
}

TEST(KlLoss, TemperatureSoftensBothSides) {
    const auto s = torch::randn({4, 5}, torch::kFloat64), t = torch::randn({4, 5}, torch::kFloat64);
    EXPECT_NEAR(kl_loss(s, t, 4.0).item<double>(), kl_loss(s / 4.0, t / 4.0, 1.0).item<double>(), 1e-12);
}

TEST(KlLoss, NonNegativeOverRandomPairs) {
    torch::manual_seed(3);
    for (int i = 0; i < 1000; ++i) {
        const auto s = torch::randn({1, 10}) * 5, t = torch::randn({1, 10}) * 5;
        ASSERT_GE(kl_loss(s, t, 1.0 + (i % 4)).item<double>(), -1e-7);
    }
}

TEST(KlLoss, NanRejected) {
    auto s = torch::zeros({1, 3});
    s[0][1] = std::nan("");
    EXPECT_THROW(kl_loss(s, torch::zeros({1, 3}), 1.0), InvalidArgument);
    EXPECT_THROW(kl_loss(torch::zeros({1, 3}), torch::zeros({1, 4}), 1.0), InvalidArgument);
}

TEST(AttentionMap, SingleChannelSquares) {
    const auto f = torch::tensor({{{1.0f, -2.0f}, {3.0f, 0.5f}}});
    EXPECT_TRUE(torch::allclose(attention_map(f, 2.0), f[0] * f[0]));
}

TEST(AttentionMap, TwoChannelExample) {
    const auto f = torch::tensor({{{1.0f, 2.0f}, {3.0f, 4.0f}}, {{0.0f, 1.0f}, {1.0f, 0.0f}}});
    EXPECT_TRUE(torch::equal(attention_map(f, 2.0), torch::tensor({{1.0f, 5.0f}, {10.0f, 16.0f}})));
}

TEST(AttentionMap, ZeroActivationAndScaling) {
    EXPECT_TRUE(torch::equal(attention_map(torch::zeros({2, 3, 4, 4}), 2.0), torch::zeros({2, 4, 4})));
    const auto f = torch::randn({2, 3, 4, 4}, torch::kFloat64);
    for (double a : {2.0, 3.0, 1.5})
        EXPECT_TRUE(torch::allclose(attention_map(2.5 * f, a), std::pow(2.5, a) * attention_map(f, a), 1e-10));
    EXPECT_GE(attention_map(f, 3.0).min().item<double>(), 0.0);
    EXPECT_THROW(attention_map(f, 1.0), InvalidArgument);
}

TEST(AtLoss, IdenticalAndScaledFeatures) {
    const auto f = torch::randn({4, 8, 5, 5});
    EXPECT_NEAR(at_loss(f, f).item<double>(), 0.0, 1e-6);
    EXPECT_NEAR(at_loss(f, 3.0 * f).item<double>(), 0.0, 1e-6);
}

TEST(AtLoss, OrthogonalMapsGiveSqrtTwo) {
    auto t = torch::zeros({1, 2, 1, 2}), s = torch::zeros({1, 3, 1, 2});
    t[0][0][0][0] = 1.0f;
    t[0][1][0][0] = 2.0f;
    s[0][2][0][1] = 0.7f;
    EXPECT_NEAR(at_loss(t, s).item<double>(), std::sqrt(2.0), 1e-6);
}

TEST(AtLoss, ZeroMapStaysFinite) {
    const auto v = at_loss(torch::zeros({2, 4, 3, 3}), torch::randn({2, 4, 3, 3})).item<double>();
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(AtLoss, SumsOverLayersAndChecksShapes) {
    const auto a = layer_feats(3, 1), b = layer_feats(3, 2);
    double sum = 0;
    for (std::size_t l = 0; l < a.size(); ++l) sum += at_loss(a[l], b[l]).item<double>();
    EXPECT_NEAR(at_loss(a, b).item<double>(), sum, 1e-5);
    EXPECT_THROW(at_loss(torch::zeros({1, 2, 3, 3}), torch::zeros({1, 2, 4, 4})), InvalidArgument);
}

TEST(CrdLoss, ConstantHalfCriticClosedForm) {
    const auto tf = layer_feats(12, 3), sf = layer_feats(12, 4);
    auto critics = critics_for(tf);
    {
        torch::NoGradGuard ng;
        for (auto& c : critics)
            for (auto& p : c->score()->parameters()) p.zero_();
    }
    const auto tags = torch::tensor({0L, 1L, 2L, 0L, 1L, 2L, 0L, 1L, 2L, 0L, 0L, 1L});
    auto gen = make_generator(1);
    for (int neg : {1, 4, 7}) {
        const double expected = (1 + neg) * 4 * std::log(2.0);
        const double got = crd_loss(tf, sf, tags, critics, neg, gen).item<double>();
        EXPECT_NEAR(got / expected, 1.0, 1e-6);
    }
}

TEST(CrdLoss, PerfectCriticApproachesZero) {
    // Domain 0 features along e1, domain 1 along e2; identity projections and a
    // large positive-definite score make positives ~1 and cross-domain negatives ~0.
    auto t = torch::zeros({6, 2, 1, 1});
    for (int i = 0; i < 6; ++i) t[i][i % 2][0][0] = 1.0f + i;
    const auto tags = torch::tensor({0L, 1L, 0L, 1L, 0L, 1L});
    std::vector<CrdCritic> critics{CrdCritic(2, 2, 2)};
    {
        torch::NoGradGuard ng;
        for (auto& item : critics[0]->named_parameters()) {
            const auto& name = item.key();
            auto& p = item.value();
            if (name.find("proj") != std::string::npos)
                name.find("weight") != std::string::npos ? p.copy_(torch::eye(2)) : p.zero_();
        }
        critics[0]->score()->weight.copy_(torch::eye(2).unsqueeze(0) * 60.0);
        critics[0]->score()->bias.fill_(-30.0);
    }
    auto gen = make_generator(2);
    const double v = crd_loss({t}, {t}, tags, critics, 4, gen).item<double>();
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1e-5);
}

TEST(CrdLoss, CriticOutputInOpenUnitInterval) {
    CrdCritic c(4, 4, 8);
    const auto h = c->forward(torch::randn({100, 4}) * 100, torch::randn({100, 4}) * 100);
    EXPECT_GT(h.min().item<double>(), 0.0);
    EXPECT_LT(h.max().item<double>(), 1.0);
}

TEST(CrdLoss, SingleDomainBatchRejected) {
    const auto tf = layer_feats(4, 3);
    auto critics = critics_for(tf);
    auto gen = make_generator(1);
    EXPECT_THROW(crd_loss(tf, tf, torch::tensor({1L, 1L, 1L, 1L}), critics, 4, gen), InvalidArgument);
}

TEST(CrdLoss, JointTrainingDecreasesLoss) {
    auto gen = make_generator(8);
    const auto tags = torch::randint(0, 2, {32}, gen, torch::TensorOptions().dtype(torch::kInt64));
    // Features carry the domain tag plus noise so positives are separable from negatives.
    std::vector<torch::Tensor> tf, sf;
    for (int c : {8, 16}) {
        const auto base = torch::randn({32, c, 2, 2}, gen) + tags.view({32, 1, 1, 1}).to(torch::kFloat32) * 2.0;
        tf.push_back(base);
        sf.push_back(base + 0.1 * torch::randn_like(base));
    }
    auto critics = critics_for(tf, 16);
    std::vector<torch::Tensor> params;
    for (auto& c : critics)
        for (auto& p : c->parameters()) params.push_back(p);
    torch::optim::Adam opt(params, torch::optim::AdamOptions(1e-2));
    double first = 0, last = 0;
    for (int step = 0; step < 200; ++step) {
        const auto loss = crd_loss(tf, sf, tags, critics, 4, gen);
        if (step == 0) first = loss.item<double>();
        last = loss.item<double>();
        opt.zero_grad();
        loss.backward();
        opt.step();
    }
    EXPECT_LT(last, 0.5 * first);
}

TEST(DistillConfig, ValidationAndJson) {
    DistillConfig c;
    EXPECT_NO_THROW(c.validate());
    auto bad = c;
    bad.lambda_at = -1;
    EXPECT_THROW(bad.validate(), InvalidArgument);
    bad = c;
    bad.alpha = 1.0;
    EXPECT_THROW(bad.validate(), InvalidArgument);
    bad = c;
    bad.negatives = 0;
    EXPECT_THROW(bad.validate(), InvalidArgument);
    bad = c;
    bad.temperature = 0;
    EXPECT_THROW(bad.validate(), InvalidArgument);
    c.lambda_at = 12.5;
    c.layers.layers = {1, 3};
    EXPECT_EQ(DistillConfig::from_json(c.to_json()).to_json(), c.to_json());
}

namespace {

ProtectedModel tiny_distill(DistillConfig cfg) {
    CodecGeometry g;
    g.hidden = 4;
    auto codec = std::make_shared<StegoCodec>(g, 1);
    DomainTriple triple(make_toy_dataset(16, 1), generate_key("bob", 16, 1, 2), codec, 3);
    ExpertEnsemble ens{make_classifier({}, 1), make_classifier({}, 2), make_classifier({}, 3), "fp"};
    cfg.epochs = 1;
    cfg.batch = 16;
    return distill_student(ens, triple, cfg);
}

}  // namespace

TEST(DistillStudent, KlOnlyIgnoresAuxiliaryHyperparameters) {
    DistillConfig a;
    a.lambda_at = 0;
    a.lambda_crd = 0;
    auto b = a;
    b.alpha = 3.0;
    b.negatives = 9;
    b.projection = 7;
    const auto ma = tiny_distill(a), mb = tiny_distill(b);
    EXPECT_EQ(module_digest(*ma.model), module_digest(*mb.model));
    EXPECT_EQ(ma.user_id, "bob");
    auto c = a;
    c.lambda_at = 1.0;
    EXPECT_NE(module_digest(*tiny_distill(c).model), module_digest(*ma.model));
}

TEST(DistillStudent, ProtectedCheckpointRoundTrip) {
    DistillConfig cfg;
    auto pm = tiny_distill(cfg);
    const auto path = std::filesystem::temp_directory_path() / "keyauth_protected.ckpt";
    save_protected(path, pm, {{"config_hash", "abc"}});
    const auto back = load_protected(path);
    EXPECT_EQ(back.user_id, pm.user_id);
    EXPECT_EQ(back.key_fingerprint, pm.key_fingerprint);
    EXPECT_EQ(back.config, pm.config);
    EXPECT_EQ(module_digest(*back.model), module_digest(*pm.model));
    std::filesystem::remove(path);
}
