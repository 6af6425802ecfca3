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

#include <set>

#include "keyauth/config.hpp"
#include "keyauth/error.hpp"

using namespace keyauth;

TEST(Config, DefaultsMatchDocumentedValues) {
    PipelineConfig c;
    c.propagate();
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.key.side, 16);
    EXPECT_EQ(c.codec_train_size, 2500);
    EXPECT_DOUBLE_EQ(c.verify.eps1, 5.0);
    EXPECT_DOUBLE_EQ(c.verify.eps2, 30.0);
    EXPECT_EQ(c.eps3, 1);
    EXPECT_EQ(c.query_size, 100);
    EXPECT_DOUBLE_EQ(c.reverse.lambda_mse, 10.0);
    EXPECT_DOUBLE_EQ(c.distill.alpha, 2.0);
    EXPECT_EQ(c.fake.aux_steps, 5);
    EXPECT_EQ(c.finetune.epochs, 30);
}

TEST(Config, IniRoundTripIsCanonical) {
    PipelineConfig c;
    c.name = "rt";
    c.seed = 42;
    c.distill.lambda_at = 3.25;
    c.data.augment = {{"crop", 4}, {"hflip", 0.5}};
    c.distill.layers.layers = {0, 2, 3};
    c.propagate();
    const auto ini = config_to_ini(c);
    const auto back = parse_config(ini);
    EXPECT_EQ(config_to_ini(back), ini);
    EXPECT_EQ(config_hash(back), config_hash(c));
    EXPECT_EQ(back.fake.layers.layers, (std::vector<int>{0, 2, 3}));
    EXPECT_EQ(back.baseline.augment, c.data.augment);
}

TEST(Config, PartialFileKeepsDefaults) {
    const auto c = parse_config("[run]\nname = small\nseed = 3\n\n[key]\nr = 8\n");
    EXPECT_EQ(c.name, "small");
    EXPECT_EQ(c.key.side, 8);
    EXPECT_EQ(c.baseline.epochs, BaselineConfig{}.epochs);
}

TEST(Config, HashTracksEveryField) {
    PipelineConfig a;
    auto b = a;
    b.fake.iters += 1;
    EXPECT_NE(config_hash(a), config_hash(b));
    b = a;
    b.verify.eps2 = 31;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a), config_hash(PipelineConfig{}));
}

TEST(Config, SeedsDifferPerStage) {
    PipelineConfig c;
    c.seed = 9;
    c.propagate();
    const std::set<std::uint64_t> seeds{c.codec.seed, c.baseline.seed, c.real.seed,     c.fake.seed,
                                        c.distill.seed, c.finetune.seed, c.transfer.seed, c.reverse.seed};
    EXPECT_EQ(seeds.size(), 8u);
}

TEST(Config, UnknownSectionsAndKeysRejected) {
    EXPECT_THROW(parse_config("[bogus]\nx = 1\n"), FormatError);
    EXPECT_THROW(parse_config("[run]\ncolour = red\n"), FormatError);
    EXPECT_THROW(parse_config("seed = 1\n"), FormatError);
}

TEST(Config, MalformedValuesRejected) {
    EXPECT_THROW(parse_config("[run]\nseed = twelve\n"), FormatError);
    EXPECT_THROW(parse_config("[distill]\nlambda_at = 1e3x\n"), FormatError);
    EXPECT_THROW(parse_config("[codec]\ntiled_messages = maybe\n"), FormatError);
    EXPECT_THROW(parse_config("[classifier]\nwidths = 8,16\n"), FormatError);
    EXPECT_THROW(parse_config("[layers]\nselect = 2,1\n"), FormatError);
}

TEST(Config, InvariantsEnforced) {
    EXPECT_THROW(parse_config("[key]\nr = 5\n"), FormatError);
    EXPECT_THROW(parse_config("[distill]\nalpha = 1\n"), FormatError);
    EXPECT_THROW(parse_config("[distill]\nlambda_crd = -1\n"), FormatError);
    EXPECT_THROW(parse_config("[verify]\neps1 = -2\n"), FormatError);
    EXPECT_THROW(parse_config("[run]\nname = a/b\n"), FormatError);
    EXPECT_THROW(parse_config("[fake]\niters = -1\n"), FormatError);
}

TEST(Policy, ParseAndFormat) {
    EXPECT_TRUE(parse_policy("none").empty());
    EXPECT_TRUE(parse_policy("").empty());
    const auto p = parse_policy("hflip:0.5, crop:4");
    EXPECT_DOUBLE_EQ(p.at("hflip"), 0.5);
    EXPECT_DOUBLE_EQ(p.at("crop"), 4.0);
    EXPECT_EQ(parse_policy(policy_to_string(p)), p);
    EXPECT_EQ(policy_to_string({}), "none");
    EXPECT_THROW(parse_policy("blur:1"), FormatError);
    EXPECT_THROW(parse_policy("hflip"), FormatError);
}
