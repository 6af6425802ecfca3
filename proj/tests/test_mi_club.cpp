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
#include <fstream>

#include "keyauth/checkpoint.hpp"
#include "keyauth/error.hpp"
#include "keyauth/mi_club.hpp"
#include "keyauth/training.hpp"

using namespace keyauth;

namespace {

std::pair<torch::Tensor, torch::Tensor> gaussian_pairs(int64_t n, double rho, std::uint64_t seed) {
    auto gen = make_generator(seed);
    const auto z = torch::randn({n, 1}, gen);
    const auto e = torch::randn({n, 1}, gen);
    return {z, rho * z + std::sqrt(1 - rho * rho) * e};
}

}  // namespace

TEST(Club, SinglePairIsExactlyZero) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto est = make_aux(3, s);
        EXPECT_EQ(estimate_mi(est, torch::randn({1, 3}), torch::randn({1, 3})), 0.0);
    }
}

TEST(Club, PermutationInvariant) {
    auto est = make_aux(2, 1);
    const auto z = torch::randn({64, 2}), zh = torch::randn({64, 2});
    const auto perm = torch::randperm(64);
    EXPECT_NEAR(estimate_mi(est, z, zh), estimate_mi(est, z.index_select(0, perm), zh.index_select(0, perm)), 1e-5);
}

TEST(Club, RepeatedCallsAgreeBitForBit) {
    auto est = make_aux(4, 2);
    const auto z = torch::randn({300, 4}), zh = torch::randn({300, 4});
    EXPECT_EQ(estimate_mi(est, z, zh), estimate_mi(est, z, zh));
}

TEST(Club, MatchesDirectDoubleSum) {
    auto est = make_aux(2, 3);
    const auto z = torch::randn({7, 2}), zh = torch::randn({7, 2});
    double total = 0;
    for (int m = 0; m < 7; ++m) {
        const double pos = log_likelihood(est, z.slice(0, m, m + 1), zh.slice(0, m, m + 1)).item<double>();
        double neg = 0;
        for (int n = 0; n < 7; ++n)
            neg += log_likelihood(est, z.slice(0, m, m + 1), zh.slice(0, n, n + 1)).item<double>() / 7.0;
        total += (pos - neg) / 7.0;
    }
    torch::NoGradGuard ng;
    EXPECT_NEAR(estimate_mi(est, z, zh), total, 1e-5);
}

TEST(Club, DimensionMismatchRejected) {
    auto est = make_aux(3, 1);
    EXPECT_THROW(estimate_mi(est, torch::randn({4, 2}), torch::randn({4, 2})), InvalidArgument);
    EXPECT_THROW(estimate_mi(est, torch::randn({4, 3}), torch::randn({5, 3})), InvalidArgument);
    EXPECT_THROW(fit_aux(est, torch::randn({4, 2}), torch::randn({4, 2}), 1, 1e-3), InvalidArgument);
}

TEST(Club, LogVarianceClamped) {
    auto est = make_aux(2, 4);
    {
        torch::NoGradGuard ng;
        for (auto& p : est->parameters()) p.fill_(100.0);
    }
    const auto q = est->forward(torch::ones({3, 2}));
    EXPECT_LE(q.logvar.max().item<double>(), AuxEstimatorImpl::kLogvarMax);
    EXPECT_GE(q.logvar.min().item<double>(), AuxEstimatorImpl::kLogvarMin);
}

TEST(FitAux, ZeroStepsLeaveEstimatorUnchanged) {
    auto est = make_aux(2, 5);
    const auto before = module_digest(*est);
    auto after = fit_aux(est, torch::randn({10, 2}), torch::randn({10, 2}), 0, 1e-2);
    EXPECT_EQ(module_digest(*after), before);
}

TEST(FitAux, HeldOutLikelihoodRisesOnIdentityPairs) {
    auto gen = make_generator(6);
    const auto z = torch::randn({256, 2}, gen), held = torch::randn({256, 2}, gen);
    AuxFitter fitter(make_aux(2, 6), 5e-3);
    std::vector<double> trace;
    for (int k = 0; k < 6; ++k) {
        torch::NoGradGuard ng;
        trace.push_back(log_likelihood(fitter.estimator(), held, held).mean().item<double>());
        torch::GradMode::set_enabled(true);
        fitter.fit(z, z, 10);
    }
    for (std::size_t k = 1; k < trace.size(); ++k) EXPECT_GT(trace[k], trace[k - 1]) << "at probe " << k;
}

TEST(FitAux, LinearGaussianSlope) {
    auto gen = make_generator(7);
    const auto z = torch::randn({1024, 1}, gen);
    const auto zh = 0.9 * z + 0.3 * torch::randn({1024, 1}, gen);
    // Closed-form least-squares slope of zhat on z.
    const double ls = ((z * zh).mean() - z.mean() * zh.mean()).item<double>() / z.var(false).item<double>();
    auto est = fit_aux(make_aux(1, 7), z, zh, 1500, 1e-2);
    torch::NoGradGuard ng;
    const auto grid = torch::linspace(-1.5, 1.5, 31).unsqueeze(1);
    const auto mean = est->forward(grid).mean;
    const double slope = ((grid * mean).mean() - grid.mean() * mean.mean()).item<double>() / grid.var(false).item<double>();
    EXPECT_NEAR(slope, ls, 0.1);
    EXPECT_NEAR(slope, 0.9, 0.1);
}

TEST(Club, IndependentGaussiansNearZero) {
    auto [z, zh] = gaussian_pairs(2048, 0.0, 8);
    auto est = fit_aux(make_aux(1, 8), z, zh, 1500, 1e-2);
    EXPECT_NEAR(estimate_mi(est, z, zh), 0.0, 0.1);
}

TEST(Club, CorrelatedGaussiansUpperBound) {
    auto [z, zh] = gaussian_pairs(2048, 0.8, 9);
    auto est = fit_aux(make_aux(1, 9), z, zh, 1500, 1e-2);
    EXPECT_GE(estimate_mi(est, z, zh), -0.5 * std::log(1 - 0.64) - 0.05);
}

TEST(MultilayerMi, BatchOfOneGivesZeros) {
    auto m = make_classifier({}, 1);
    LayerSelection sel;
    std::vector<AuxEstimator> ests;
    for (int d : {16, 32, 64, 128}) ests.push_back(make_aux(d, d));
    const auto x = torch::rand({1, 3, 32, 32});
    const auto r = multilayer_mi(m, m, x, x, sel, ests);
    ASSERT_EQ(r.per_layer.size(), 4u);
    for (double v : r.per_layer) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(r.total, 0.0);
}

TEST(MultilayerMi, SelfPairedIsNonNegative) {
    auto m = make_classifier({}, 2);
    const auto x = torch::rand({64, 3, 32, 32});
    LayerSelection sel{{0, 3}};
    auto ests = fit_layer_estimators(m, m, x, x, sel, 200, 5e-3, 3);
    const auto r = multilayer_mi(m, m, x, x, sel, ests);
    ASSERT_EQ(r.per_layer.size(), 2u);
    for (double v : r.per_layer) EXPECT_GE(v, -1e-4);
    EXPECT_NEAR(r.total, r.per_layer[0] + r.per_layer[1], 1e-12);
}

TEST(MultilayerMi, EstimatorCountMustMatch) {
    auto m = make_classifier({}, 3);
    std::vector<AuxEstimator> ests{make_aux(16, 1)};
    const auto x = torch::rand({2, 3, 32, 32});
    EXPECT_THROW(multilayer_mi(m, m, x, x, LayerSelection{}, ests), InvalidArgument);
}

TEST(LayerSelection, Validation) {
    EXPECT_NO_THROW(LayerSelection{}.validate());
    EXPECT_THROW((LayerSelection{{1, 1}}.validate()), InvalidArgument);
    EXPECT_THROW((LayerSelection{{2, 1}}.validate()), InvalidArgument);
    EXPECT_THROW((LayerSelection{{0, 4}}.validate()), InvalidArgument);
}

TEST(MiCsvLog, WritesHeaderOnce) {
    const auto path = std::filesystem::temp_directory_path() / "keyauth_mi_log.csv";
    std::filesystem::remove(path);
    {
        MiCsvLog log(path);
        log.append(0, LayerSelection{}, {0.1, 0.2, 0.3, 0.4});
    }
    {
        MiCsvLog log(path);
        log.append(5, 2, 1.5);
    }
    std::ifstream in(path);
    std::string line;
    int lines = 0, headers = 0;
    while (std::getline(in, line)) {
        ++lines;
        headers += line == "step,layer,mi";
    }
    EXPECT_EQ(lines, 6);
    EXPECT_EQ(headers, 1);
    std::filesystem::remove(path);
}
