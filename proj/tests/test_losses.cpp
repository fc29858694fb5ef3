// Copyright 2026 The PatchMVS Authors. All Rights Reserved.
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

#include "support.hpp"

namespace pmvs {
namespace {

class LossScene : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { bundle_ = new SceneBundle(generate_scene(testing::small_scene(32, 4))); }
  static void TearDownTestSuite() { delete bundle_; }
  static const SceneBundle& b() { return *bundle_; }
  static std::vector<const View*> sources_of(int ref) {
    std::vector<const View*> out;
    for (int s : {ref - 1, ref + 1})
      if (s >= 0 && s < static_cast<int>(b().views.size())) out.push_back(&b().views[s]);
    return out;
  }
  static inline SceneBundle* bundle_ = nullptr;
};

TEST(Photometric, IdentityInputsGiveZero) {
  std::mt19937_64 rng(1);
  const Image a = testing::random_image(rng, 3, 9, 7);
  const Image rendered[] = {a, a};
  const ValidMask masks[] = {ValidMask(9, 7, true), ValidMask(9, 7, true)};
  EXPECT_EQ(pixel_photometric(a, rendered, masks).scalar, 0.0);
  EXPECT_EQ(ssim_loss(a, rendered, masks).scalar, 0.0);
  const auto p = extract_patch_image(a, 3);
  const PatchImage pr[] = {p.patches};
  const ValidMask pm[] = {p.mask};
  EXPECT_EQ(patch_photometric(p.patches, pr, pm, p.mask).scalar, 0.0);
}

TEST(Photometric, HandComputedL1) {
  Image a(2, 2, 1), b(2, 2, 1), c(2, 2, 1);
  a.data() = {0.0, 1.0, 0.5, 0.5};
  b.data() = {0.2, 1.0, 0.1, 0.5};
  c.data() = {0.0, 0.4, 0.5, 0.5};
  const Image r[] = {b, c};
  ValidMask mb(2, 1, true), mc(2, 1, true);
  mc.set(0, false);
  const ValidMask m[] = {mb, mc};
  const LossReport l = pixel_photometric(a, r, m);
  // pixel 0: only b, (0.2 + 0.4) / 2; pixel 1: b gives 0, c gives 0.6 / 2.
  EXPECT_NEAR(l.map.at(0, 0, 0), 0.3, 1e-15);
  EXPECT_NEAR(l.map.at(0, 1, 0), 0.15, 1e-15);
  EXPECT_NEAR(l.scalar, 0.225, 1e-15);
  EXPECT_EQ(l.valid_count, 2u);
}

TEST(Photometric, ShapeMismatchThrows) {
  const Image a(1, 4, 4), b(1, 3, 4);
  const Image r[] = {b};
  const ValidMask m[] = {ValidMask(4, 4, true)};
  EXPECT_THROW(pixel_photometric(a, r, m), std::invalid_argument);
  EXPECT_THROW(pixel_photometric(a, std::span<const Image>{}, std::span<const ValidMask>{}),
               std::invalid_argument);
}

TEST_F(LossScene, PatchSizeOneEqualsPixelLoss) {
  const int ref = 2;
  const View& rv = b().views[ref];
  const auto srcs = sources_of(ref);
  const DepthMap d = testing::add_noise(b().gt_depths[ref], 5.0, 3);
  // Independent path: warp every pixel, sample bilinearly, compare pixel-wise.
  // PairWarper rather than warp_pixel so both sides agree on pixels that land
  // exactly on the image border.
  std::vector<Image> rendered;
  std::vector<ValidMask> masks;
  for (const View* s : srcs) {
    const PairWarper warper(rv.camera, s->camera);
    CoordField f(32, 32);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const PixelWarp w = warper.warp(Vec2(x, y), d.at(x, y));
        f.coords[static_cast<std::size_t>(y) * 32 + x] = w.coords;
        f.valid[static_cast<std::size_t>(y) * 32 + x] = w.valid;
      }
    auto smp = bilinear_sample(s->image, f);
    rendered.push_back(std::move(smp.values));
    masks.push_back(std::move(smp.mask));
  }
  const double pixel = pixel_photometric(rv.image, rendered, masks).scalar;
  LossWeights w = LossWeights{}.only(Term::kPatch);
  w.patch_size = 1;
  const SideObjective obj(rv, srcs, 0, w, nullptr);
  EXPECT_NEAR(obj.evaluate(d, d).scalar(Term::kPatch), pixel, 1e-12);
  EXPECT_GT(pixel, 1e-4);
}

TEST(Ssim, LossOfIdenticalImagesIsZeroAndBounded) {
  std::mt19937_64 rng(2);
  const Image a = testing::random_image(rng, 3, 8, 8), b = testing::random_image(rng, 3, 8, 8);
  const Image same[] = {a};
  const Image other[] = {b};
  const ValidMask m[] = {ValidMask(8, 8, true)};
  EXPECT_NEAR(ssim_loss(a, same, m).scalar, 0.0, 1e-15);
  const LossReport l = ssim_loss(a, other, m);
  EXPECT_GT(l.scalar, 0.0);
  for (double v : l.map.data()) EXPECT_LE(v, 1.0);
  // A hole in the source mask removes every window touching it.
  ValidMask hole(8, 8, true);
  hole.set(4, 4, false);
  const ValidMask hm[] = {hole};
  EXPECT_EQ(ssim_loss(a, other, hm).valid_count, 64u - 9u);
}

TEST_F(LossScene, GeometricConsistencyZeroAtGroundTruth) {
  const View& r = b().views[2];
  const View& s = b().views[3];
  const LossReport l = geometric_consistency(r.image, r.camera, b().gt_depths[2], s.camera, b().gt_depths[3]);
  EXPECT_LE(l.scalar, 1e-6);
  EXPECT_GT(l.valid_count, 500u);
}

TEST_F(LossScene, GeometricConsistencyRisesWithCorruptedSourceDepth) {
  const View& r = b().views[2];
  const View& s = b().views[3];
  DepthMap bad = b().gt_depths[3];
  for (double& v : bad.depth) v *= 1.1;
  const double base = geometric_consistency(r.image, r.camera, b().gt_depths[2], s.camera, b().gt_depths[3]).scalar;
  const double corrupted = geometric_consistency(r.image, r.camera, b().gt_depths[2], s.camera, bad).scalar;
  EXPECT_GT(corrupted, 10.0 * base);
  EXPECT_GT(corrupted, 1e-3);
}

TEST(Smoothness, ConstantDepthIsZeroAndRampIsSlope) {
  const Image flat(3, 8, 8, 0.5);
  const DepthMap c(8, 8, 600.0, true);
  EXPECT_EQ(smoothness(flat, c).scalar, 0.0);
  DepthMap ramp(8, 8, 0.0, true);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) ramp.depth[static_cast<std::size_t>(y) * 8 + x] = 500 + 3.0 * x;
  const LossReport l = smoothness(flat, ramp, 10.0);
  EXPECT_NEAR(l.map.at(0, 4, 4), 0.3, 1e-12);
  EXPECT_NEAR(l.map.at(0, 7, 4), (0.5 * 3.0 + 3.0) / 10.0, 1e-12);  // clamped stencil
  ramp.mask.set(static_cast<std::size_t>(4 * 8 + 4), false);
  EXPECT_FALSE(smoothness(flat, ramp).mask(4, 3));
}

TEST(Smoothness, EdgeAwareWeights) {
  Image img(1, 5, 5, 0.0);
  for (int y = 0; y < 5; ++y) img.at(0, 3, y) = 1.0;
  const SmoothnessWeights w = smoothness_weights(img);
  EXPECT_DOUBLE_EQ(w.wx.at(0, 0, 0), 1.0);
  EXPECT_NEAR(w.wx.at(0, 2, 2), std::exp(-0.5), 1e-15);
  EXPECT_DOUBLE_EQ(w.wy.at(0, 2, 2), 1.0);
}

TEST_F(LossScene, FeatureAlignmentZeroAtGroundTruthForSameView) {
  const View& r = b().views[2];
  const View same[] = {r};
  const GradientFeatureExtractor fx(2);
  EXPECT_NEAR(feature_alignment(r.image, r.camera, same, b().gt_depths[2], fx).scalar, 0.0, 1e-15);
  const View other[] = {b().views[3]};
  const LossReport l = feature_alignment(r.image, r.camera, other, b().gt_depths[2], fx);
  const LossReport bad = feature_alignment(r.image, r.camera, other, testing::add_noise(b().gt_depths[2], 40.0, 5), fx);
  EXPECT_LT(l.scalar, bad.scalar);
}

TEST(Combine, WeightedSumMatchesHand) {
  const LossWeights w;
  const std::array<double, kTermCount> v{0.11, 0.37, 0.05, 2.5, 0.2};
  const double hand = 0.8 * 0.11 + 0.16 * 0.37 + 1.0 * 0.05 + 0.01 * 2.5 + 1.0 * 0.2;
  EXPECT_NEAR(combine_terms(v, w), hand, 1e-12);
  const double s[] = {1.5, 0.25, 0.125};
  EXPECT_NEAR(combine_stages(s, w.stage_weights), 0.5 * 1.5 + 1.0 * 0.25 + 2.0 * 0.125, 1e-12);
  const double two[] = {1.0, 2.0};
  EXPECT_THROW(combine_stages(two, w.stage_weights), std::invalid_argument);
}

TEST(Combine, WeightsValidate) {
  LossWeights w;
  w.patch = -1;
  EXPECT_THROW(w.validate(), std::invalid_argument);
  w = LossWeights{};
  w.patch_size = 4;
  EXPECT_THROW(w.validate(), std::invalid_argument);
  const LossWeights only = LossWeights{}.only(Term::kSsim);
  EXPECT_EQ(only.lambdas(), (std::array<double, kTermCount>{0, 1, 0, 0, 0}));
}

TEST_F(LossScene, TotalEqualsWeightedTermsAndAttributionSums) {
  const int ref = 2;
  SideInputs in;
  in.ref = &b().views[ref];
  in.sources = {&b().views[3], &b().views[1]};
  in.partner = 0;
  const DepthMap d = testing::add_noise(b().gt_depths[ref], 6.0, 1);
  const DepthMap dp = testing::add_noise(b().gt_depths[3], 6.0, 2);
  in.depth = &d;
  in.partner_depth = &dp;
  const LossWeights w;
  const TotalLoss t = total_single_scale(in, w);
  std::array<double, kTermCount> v{};
  for (std::size_t k = 0; k < kTermCount; ++k) v[k] = t.terms[k].scalar;
  const double hand = 0.8 * v[0] + 0.16 * v[1] + 1.0 * v[2] + 0.01 * v[3] + 1.0 * v[4];
  EXPECT_NEAR(t.total, hand, 1e-12);
  double sum = 0.0;
  for (double a : t.attribution.data()) sum += a;
  EXPECT_NEAR(sum, t.total, 1e-12);
  for (std::size_t k = 0; k < kTermCount; ++k) EXPECT_GT(v[k], 0.0) << kTermNames[k];
  in.partner_depth = nullptr;
  EXPECT_THROW(total_single_scale(in, w), std::invalid_argument);
}

TEST_F(LossScene, MultiScaleCombinesStagesWithMergedPatches) {
  std::vector<DepthMap> depths;
  for (int factor : {4, 2, 1}) depths.push_back(downsample_depth_box(b().gt_depths[2], factor));
  std::vector<DepthMap> partner;
  for (int factor : {4, 2, 1}) partner.push_back(downsample_depth_box(b().gt_depths[3], factor));
  std::vector<std::vector<View>> per_stage(3);
  const int factors[] = {4, 2, 1};
  for (int k = 0; k < 3; ++k)
    for (const View& v : b().views)
      per_stage[k].push_back(View{downsample_box(v.image, factors[k]), v.camera.downscaled(factors[k])});
  std::vector<SideInputs> stages(3);
  for (int k = 0; k < 3; ++k) {
    stages[k].ref = &per_stage[k][2];
    stages[k].sources = {&per_stage[k][3], &per_stage[k][1]};
    stages[k].depth = &depths[k];
    stages[k].partner_depth = &partner[k];
  }
  LossWeights w;
  w.feature = 0.0;  // 8x8 at the coarsest stage is too small for the feature grid border
  const MultiScaleLoss m = total_multi_scale(stages, w);
  ASSERT_EQ(m.stages.size(), 3u);
  EXPECT_NEAR(m.total, 0.5 * m.stages[0].total + 1.0 * m.stages[1].total + 2.0 * m.stages[2].total, 1e-12);
  const TotalLoss merged = total_single_scale(stages[2], w, default_extractor(), true);
  EXPECT_NEAR(merged.total, m.stages[2].total, 1e-15);
}

TEST(UniqueMinimum, SyntheticCurves) {
  const auto curves_of = [](const std::vector<std::vector<double>>& per_pixel) {
    const std::size_t k = per_pixel.front().size();
    std::vector<Image> c(k, Image(1, static_cast<int>(per_pixel.size()), 1));
    for (std::size_t p = 0; p < per_pixel.size(); ++p)
      for (std::size_t j = 0; j < k; ++j) c[j].at(0, static_cast<int>(p), 0) = per_pixel[p][j];
    return c;
  };
  const auto curves = curves_of({{5, 3, 1, 3, 5},       // single basin
                                 {1, 4, 1.05, 4, 6},    // rival minimum within 10% of the range
                                 {1, 4, 2, 4, 6},       // rival minimum 20% above
                                 {6, 2, 2, 2, 6}});     // plateau counts once
  const std::vector<ValidMask> masks(5, ValidMask(4, 1, true));
  const ValidMask all(4, 1, true);
  EXPECT_DOUBLE_EQ(unique_minimum_fraction(curves, masks, all, 0.1), 0.75);
  EXPECT_DOUBLE_EQ(unique_minimum_fraction(curves, masks, all, 0.3), 0.5);
  ValidMask one(4, 1);
  one.set(1, true);
  EXPECT_DOUBLE_EQ(unique_minimum_fraction(curves, masks, one, 0.0), 1.0);
  EXPECT_THROW(unique_minimum_fraction(std::span<const Image>(curves.data(), 2),
                                       std::span<const ValidMask>(masks.data(), 2), all, 0.1),
               std::invalid_argument);
}

TEST_F(LossScene, PhotometricCurvesBottomOutNearGroundTruth) {
  const auto srcs = sources_of(2);
  const auto h = make_hypotheses(422.2222222222, 944.4444444444, 48);
  const LossCurves c = photometric_curves(b().views[2], srcs, h, 3);
  ASSERT_EQ(c.curves.size(), 48u);
  std::size_t n = 0, hit = 0;
  for (std::size_t i = 0; i < 32 * 32; ++i) {
    bool ok = true;
    for (const auto& m : c.masks) ok = ok && m[i];
    if (!ok) continue;
    std::size_t best = 0;
    for (std::size_t k = 1; k < 48; ++k)
      if (c.curves[k].channel(0)[i] < c.curves[best].channel(0)[i]) best = k;
    ++n;
    hit += std::abs(h.at(0, static_cast<int>(best)) - b().gt_depths[2].depth[i]) <= h.interval();
  }
  ASSERT_GT(n, 100u);
  EXPECT_GT(static_cast<double>(hit) / n, 0.8);
}

}  // namespace
}  // namespace pmvs
