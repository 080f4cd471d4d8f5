// Copyright 2026 The flashdec Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include "flashdec/decoder.hpp"
#include "test_support.hpp"

namespace flashdec {
namespace {

using testing::random_tensor;

DecoderConfig small_config(std::uint64_t seed = 3) {
  DecoderConfig c;
  c.latent_channels = 4;
  c.output_channels = 3;
  c.norm_groups = 2;
  c.seed = seed;
  StageSpec a{"mid", OperatorKind::kCausal3d, 8, 8, 1, {1, 1, 1}, ShortcutKind::kIdentity};
  StageSpec b{"up0", OperatorKind::kCausal3d, 8, 4, 1, {2, 2, 2}, ShortcutKind::kConv1x1};
  StageSpec d{"up1", OperatorKind::kCausal3d, 4, 4, 1, {1, 2, 2}, ShortcutKind::kIdentity};
  c.stages = {a, b, d};
  return c;
}

const std::map<std::string, OperatorKind> kWanPlan{{"mid", OperatorKind::kDwSep3d},
                                                   {"up0", OperatorKind::kDwSep3d},
                                                   {"up1", OperatorKind::kDwSep3d},
                                                   {"up2", OperatorKind::kConv2d},
                                                   {"up3", OperatorKind::kConv2d}};

TEST(Decoder, ReferenceForwardShape) {
  auto d = build_decoder<float>(DecoderConfig::reference(1));
  Tensor<float> latent = random_tensor({8, 4, 8, 8}, 1).cast<float>();
  auto out = forward_eval(d, latent);
  EXPECT_EQ(out.video.shape(), (Shape{3, 16, 64, 64}));
  EXPECT_TRUE(out.video.all_finite());
  EXPECT_TRUE(out.features.empty());
}

TEST(Decoder, OutputExtentsFollowStageFactors) {
  const auto c = small_config();
  auto d = build_decoder<double>(c);
  const auto f = c.total_upsample();
  for (Shape lat : {Shape{4, 1, 2, 3}, Shape{4, 3, 1, 1}, Shape{4, 2, 4, 2}}) {
    auto out = forward_eval(d, random_tensor(lat, 7));
    EXPECT_EQ(out.video.shape(),
              (Shape{3, lat[1] * f[0], lat[2] * f[1], lat[3] * f[2]}));
  }
}

TEST(Decoder, MismatchedChannelsWithIdentityShortcutRejected) {
  auto c = DecoderConfig::reference();
  c.stages[3].channels_in = 24;
  c.stages[3].shortcut = ShortcutKind::kIdentity;
  EXPECT_THROW(build_decoder<double>(c), ConfigError);
  auto c2 = DecoderConfig::reference();
  c2.stages[2].shortcut = ShortcutKind::kIdentity;  // 32 -> 16
  EXPECT_THROW(c2.validate(), ConfigError);
}

TEST(Decoder, MidMustNotUpsample) {
  auto c = DecoderConfig::reference();
  c.stages[0].upsample = {1, 2, 2};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Decoder, SameSeedBitIdentical) {
  auto a = build_decoder<double>(DecoderConfig::reference(5));
  auto b = build_decoder<double>(DecoderConfig::reference(5));
  auto c = build_decoder<double>(DecoderConfig::reference(6));
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == c);
}

TEST(Decoder, CaptureSemantics) {
  const auto c = small_config();
  auto d = build_decoder<double>(c);
  auto lat = random_tensor({4, 2, 3, 3}, 9);
  auto none = forward_eval(d, lat, {});
  EXPECT_TRUE(none.features.empty());
  auto mid = forward_eval(d, lat, {"mid"});
  ASSERT_EQ(mid.features.size(), 1u);
  EXPECT_EQ(mid.features.at("mid").shape(), (Shape{8, 2, 3, 3}));
  EXPECT_EQ(mid.video, none.video);
  auto both = forward_eval(d, lat, {"up0", "up1"});
  EXPECT_EQ(both.features.size(), 2u);
  EXPECT_EQ(both.features.at("up0").shape(), (Shape{4, 4, 6, 6}));
  EXPECT_EQ(both.features.at("up1").shape(), (Shape{4, 4, 12, 12}));
  EXPECT_THROW(forward_eval(d, lat, {"up9"}), ConfigError);
}

TEST(Decoder, SplitRunMatchesWholeRunBitExactly) {
  const auto c = small_config();
  auto d = build_decoder<double>(c);
  auto lat = random_tensor({4, 2, 3, 3}, 10);
  auto whole = forward_eval(d, lat, {"mid", "up0"});
  EXPECT_EQ(forward_from(d, "mid", whole.features.at("mid")), whole.video);
  EXPECT_EQ(forward_from(d, "up0", whole.features.at("up0")), whole.video);
}

TEST(Decoder, LatentChannelMismatchIsDimensionError) {
  auto d = build_decoder<double>(small_config());
  EXPECT_THROW(forward_eval(d, random_tensor({3, 1, 2, 2}, 1)), DimensionError);
}

TEST(Decoder, WholeDecoderIsCausal) {
  auto d = build_decoder<double>(small_config());
  auto lat = random_tensor({4, 4, 3, 3}, 11);
  auto base = forward_eval(d, lat).video;
  for (int t0 = 1; t0 < 4; ++t0) {
    auto pert = lat;
    for (int c = 0; c < 4; ++c) pert.at(c, t0, 1, 1) += 0.5;
    auto out = forward_eval(d, pert).video;
    // up0 doubles time; output frames < 2 * t0 come from latent frames < t0.
    for (std::int64_t c = 0; c < out.dim(0); ++c)
      for (std::int64_t t = 0; t < 2 * t0; ++t)
        for (std::int64_t h = 0; h < out.dim(2); ++h)
          for (std::int64_t w = 0; w < out.dim(3); ++w)
            ASSERT_EQ(out.at(c, t, h, w), base.at(c, t, h, w));
  }
}

TEST(Decoder, ParameterShapeValidation) {
  auto d = build_decoder<double>(small_config());
  auto params = d.params();
  params.at("mid.conv_in.bias") = Tensor<double>({7});
  EXPECT_THROW(Decoder<double>(small_config(), params), ConfigError);
  params = d.params();
  params.erase("up1.block0.norm1.scale");
  EXPECT_THROW(Decoder<double>(small_config(), params), ConfigError);
}

TEST(Decoder, ConfigJsonRoundTripAndUnknownKeys) {
  const auto c = DecoderConfig::reference(17);
  EXPECT_EQ(DecoderConfig::from_json(c.to_json()), c);
  auto j = c.to_json();
  j["widht"] = 3;
  EXPECT_THROW(DecoderConfig::from_json(j), ConfigError);
  j = c.to_json();
  j["stages"][0]["chanels_in"] = 3;
  EXPECT_THROW(DecoderConfig::from_json(j), ConfigError);
  j = c.to_json();
  j["stages"][1]["operator"] = "conv4d";
  EXPECT_THROW(DecoderConfig::from_json(j), ConfigError);
}

TEST(Substitute, EmptyPlanIsIdentity) {
  auto d = build_decoder<double>(DecoderConfig::reference(2));
  EXPECT_TRUE(substitute_operators(d, {}) == d);
}

TEST(Substitute, WanAssignment) {
  auto d = build_decoder<double>(DecoderConfig::reference(2));
  auto s = substitute_operators(d, kWanPlan);
  const auto& st = s.config().stages;
  EXPECT_EQ(st[0].op, OperatorKind::kDwSep3d);
  EXPECT_EQ(st[1].op, OperatorKind::kDwSep3d);
  EXPECT_EQ(st[2].op, OperatorKind::kDwSep3d);
  EXPECT_EQ(st[3].op, OperatorKind::kConv2d);
  EXPECT_EQ(st[4].op, OperatorKind::kConv2d);
  EXPECT_LT(s.parameter_count(), d.parameter_count());
  // Norms and shortcuts are untouched.
  for (const auto& [name, t] : s.params()) {
    if (name.find(".norm") != std::string::npos || name.find(".shortcut") != std::string::npos) {
      EXPECT_EQ(t, d.param(name)) << name;
    }
  }
}

TEST(Substitute, PartialPlanCopiesOtherStagesBitExactly) {
  auto d = build_decoder<double>(DecoderConfig::reference(2));
  auto s = substitute_operators(d, {{"up2", OperatorKind::kConv2d}});
  for (const auto& [name, t] : s.params()) {
    if (name.rfind("up2.", 0) != 0) {
      EXPECT_EQ(t, d.param(name)) << name;
    }
  }
  EXPECT_THROW(substitute_operators(d, {{"up7", OperatorKind::kConv2d}}), ConfigError);
}

TEST(Substitute, ParameterCountMatchesHandCount) {
  // One stage, one block, 16 -> 16 at N = 3.
  DecoderConfig c;
  c.latent_channels = 16;
  c.output_channels = 16;
  c.norm_groups = 4;
  c.stages = {StageSpec{"mid", OperatorKind::kCausal3d, 16, 16, 1, {1, 1, 1},
                        ShortcutKind::kIdentity}};
  auto d = build_decoder<double>(c);
  const std::int64_t conv3d = 16 * 16 * 27 + 16;
  const std::int64_t dwsep = 16 * 27 + 16 * 16 + 16;
  const std::int64_t conv2d = 16 * 16 * 9 + 16;
  const std::int64_t norms = 3 * 2 * 16;
  EXPECT_EQ(d.parameter_count(), 4 * conv3d + norms);
  EXPECT_EQ(substitute_operators(d, {{"mid", OperatorKind::kDwSep3d}}).parameter_count(),
            4 * dwsep + norms);
  EXPECT_EQ(substitute_operators(d, {{"mid", OperatorKind::kConv2d}}).parameter_count(),
            4 * conv2d + norms);
}

TEST(Substitute, InterfaceShapesPreserved) {
  auto d = build_decoder<double>(DecoderConfig::reference(4));
  auto s = substitute_operators(d, kWanPlan);
  auto lat = random_tensor({8, 2, 2, 2}, 3).cast<double>();
  const std::set<std::string> all{"mid", "up0", "up1", "up2", "up3"};
  auto a = forward_eval(d, lat, all);
  auto b = forward_eval(s, lat, all);
  EXPECT_EQ(a.video.shape(), b.video.shape());
  for (const auto& n : all) EXPECT_EQ(a.features.at(n).shape(), b.features.at(n).shape());
}

}  // namespace
}  // namespace flashdec
