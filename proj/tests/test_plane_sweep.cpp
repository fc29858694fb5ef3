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

CostVolume one_pixel_volume(std::vector<double> costs) {
  CostVolume cv{1, 1, static_cast<int>(costs.size()), std::move(costs), {}};
  cv.valid.assign(cv.cost.size(), 1);
  return cv;
}

std::vector<SourceView> sources_of(const SceneBundle& b, int ref) {
  std::vector<SourceView> out;
  for (int s = 0; s < static_cast<int>(b.views.size()); ++s)
    if (s != ref) out.push_back({&b.views[s].image, b.views[s].camera});
  return out;
}

TEST(Hypotheses, LinearSamplesAndInterval) {
  const auto h = make_hypotheses(425, 935, 48);
  EXPECT_EQ(h.count(), 48);
  EXPECT_DOUBLE_EQ(h.front(0), 425.0);
  EXPECT_DOUBLE_EQ(h.back(0), 935.0);
  EXPECT_NEAR(h.interval(), 510.0 / 47.0, 1e-12);
  for (int k = 1; k < 48; ++k) EXPECT_NEAR(h.at(0, k) - h.at(0, k - 1), h.interval(), 1e-9);
  EXPECT_THROW(make_hypotheses(425, 935, 1), std::invalid_argument);
  EXPECT_THROW(make_hypotheses(935, 425, 8), std::invalid_argument);
}

TEST(Hypotheses, NarrowRangeCentersAndClamps) {
  DepthMap prev(3, 1, 0.0, true);
  prev.depth = {600.0, 430.0, 0.0};
  prev.mask.set(2, false);
  const auto h = narrow_range(prev, 8, 1.06, 425, 935);
  EXPECT_FALSE(h.is_global());
  EXPECT_NEAR(h.front(0), 600 - 8 * 1.06, 1e-12);
  EXPECT_NEAR(h.back(0), 600 + 8 * 1.06, 1e-12);
  EXPECT_DOUBLE_EQ(h.front(1), 425.0);
  EXPECT_NEAR(h.back(1), 430 + 8 * 1.06, 1e-12);
  EXPECT_DOUBLE_EQ(h.front(2), 425.0);
  EXPECT_DOUBLE_EQ(h.back(2), 935.0);
}

// Hand-built softmax: costs (0, 1, 2) at temperature 1.
TEST(Regress, SoftmaxExpectationOracle) {
  const auto h = DepthHypotheses::global({500, 600, 700}, 100);
  const DepthMap d = regress_depth(one_pixel_volume({0, 1, 2}), h, 1.0);
  const double e0 = 1, e1 = std::exp(-1.0), e2 = std::exp(-2.0), z = e0 + e1 + e2;
  EXPECT_NEAR(d.depth[0], (500 * e0 + 600 * e1 + 700 * e2) / z, 1e-12);
  EXPECT_NEAR(d.confidence[0], e0 / z, 1e-12);
  EXPECT_TRUE(d.mask[0]);
}

TEST(Regress, UniformCostGivesMeanAndOneHotGivesSample) {
  const auto h = make_hypotheses(500, 800, 4);
  EXPECT_NEAR(regress_depth(one_pixel_volume({3, 3, 3, 3}), h, 0.5).depth[0], 650.0, 1e-9);
  const DepthMap d = regress_depth(one_pixel_volume({5, 5, 0, 5}), h, 1e-3);
  EXPECT_NEAR(d.depth[0], 700.0, 1e-9);
  EXPECT_NEAR(d.confidence[0], 1.0, 1e-12);
  EXPECT_THROW(regress_depth(one_pixel_volume({1, 2, 3, 4}), h, 0.0), std::invalid_argument);
}

TEST(Regress, MaskedHypothesesAreSkipped) {
  CostVolume cv = one_pixel_volume({0.0, 9.0, 9.0});
  cv.valid[0] = 0;
  const auto h = make_hypotheses(500, 700, 3);
  EXPECT_NEAR(regress_depth(cv, h, 1.0).depth[0], 650.0, 1e-9);
  EXPECT_EQ(argmin_hypothesis(cv)[0], 1);
  cv.valid.assign(3, 0);
  EXPECT_FALSE(regress_depth(cv, h, 1.0).mask[0]);
  EXPECT_EQ(argmin_hypothesis(cv)[0], -1);
}

// Population variance over {ref, warped sources}, checked by hand for one
// pixel and one hypothesis.
TEST(CostVolume, VarianceMetricOracle) {
  const SceneBundle b = generate_scene(testing::small_scene(32));
  const auto srcs = sources_of(b, 2);
  const auto h = DepthHypotheses::global({610.0}, 1.0);
  const CostVolume cv = build_cost_volume(b.views[2].image, srcs, b.views[2].camera, h);
  const int x = 20, y = 9;
  double cost = 0.0;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> v{b.views[2].image.at(c, x, y)};
    for (const auto& s : srcs) {
      const PixelWarp w = warp_pixel(b.views[2].camera, s.camera, Vec2(x, y), 610.0);
      const auto cell = bilinear_cell(w.coords.x(), w.coords.y(), 32, 32);
      if (cell) v.push_back(bilinear_value(*s.features, c, *cell));
    }
    double m = 0, q = 0;
    for (double a : v) m += a / v.size();
    for (double a : v) q += (a - m) * (a - m) / v.size();
    cost += q / 3;
  }
  EXPECT_NEAR(cv.at(0, static_cast<std::size_t>(y) * 32 + x), cost, 1e-15);
}

TEST(CostVolume, ZeroAtExactGroundTruthHypothesis) {
  const SceneBundle b = generate_scene(SceneSpec::two_plane(3));
  // 600 and 800 are both samples of this sweep.
  const auto h = make_hypotheses(400, 1000, 61);
  const CostVolume cv = build_cost_volume(b.views[2].image, sources_of(b, 2), b.views[2].camera, h);
  const DepthMap& gt = b.gt_depths[2];
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.depth.size(); ++i) {
    const int k = static_cast<int>(std::lround((gt.depth[i] - 400.0) / 10.0));
    ASSERT_NEAR(h.at(0, k), gt.depth[i], 1e-9);
    if (!cv.valid_at(k, i)) continue;
    EXPECT_LE(cv.at(k, i), 1e-12);
    ++n;
  }
  EXPECT_EQ(n, gt.depth.size());
}

TEST(CostVolume, ArgminHitsGroundTruthOnTexturedPixels) {
  const SceneBundle b = generate_scene(SceneSpec::two_plane(5));
  const auto h = make_hypotheses(422.2222222222, 944.4444444444, 48);
  const CostVolume cv = build_cost_volume(b.views[2].image, sources_of(b, 2), b.views[2].camera, h);
  const auto best = argmin_hypothesis(cv);
  const ValidMask weak = weak_texture_mask(b, 2);
  std::size_t n = 0, hit = 0;
  for (std::size_t i = 0; i < best.size(); ++i) {
    if (weak[i] || best[i] < 0) continue;
    ++n;
    hit += std::abs(h.at(i, best[i]) - b.gt_depths[2].depth[i]) < 0.5 * h.interval();
  }
  ASSERT_GT(n, 3000u);
  EXPECT_GE(static_cast<double>(hit) / n, 0.99);
}

TEST(CostVolume, RejectsMismatchedInputs) {
  const SceneBundle b = generate_scene(testing::small_scene(32));
  const auto h = make_hypotheses(425, 935, 4);
  EXPECT_THROW(build_cost_volume(b.views[0].image, std::vector<SourceView>{}, b.views[0].camera, h),
               std::invalid_argument);
  const Image gray = grayscale(b.views[1].image);
  const std::vector<SourceView> bad{{&gray, b.views[1].camera}};
  EXPECT_THROW(build_cost_volume(b.views[0].image, bad, b.views[0].camera, h), std::invalid_argument);
}

TEST(DepthResample, NearestUpAndBoxDown) {
  DepthMap d(2, 2, 0.0, true);
  d.depth = {1, 2, 3, 4};
  d.mask.set(3, false);
  const DepthMap up = upsample_depth_nearest(d, 2);
  EXPECT_EQ(up.width, 4);
  EXPECT_EQ(up.at(1, 1), 1.0);
  EXPECT_EQ(up.at(2, 0), 2.0);
  EXPECT_FALSE(up.valid(3, 3));
  const DepthMap down = downsample_depth_box(up, 2);
  EXPECT_EQ(down.depth, d.depth);
  EXPECT_FALSE(down.mask[3]);
  EXPECT_TRUE(down.mask[0]);
}

// Two samples a and a + e have variance e^2 / 4 in every channel.
TEST(CostVolume, SingleOffsetSourceGivesQuarterSquare) {
  std::mt19937_64 rng(12);
  const Image ref = testing::random_image(rng, 3, 8, 8);
  Image src = ref;
  const double e = 0.05;
  for (double& v : src.data()) v += e;
  const CameraView cam = testing::simple_camera(8, 8, 10);
  const std::vector<SourceView> srcs{{&src, cam}};
  const CostVolume cv = build_cost_volume(ref, srcs, cam, make_hypotheses(100, 200, 3));
  std::size_t n = 0;
  for (int k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 64; ++i) {
      if (!cv.valid_at(k, i)) continue;
      EXPECT_NEAR(cv.at(k, i), e * e / 4, 1e-12);
      ++n;
    }
  EXPECT_GE(n, 3u * 49u);
}

TEST(Hypotheses, EndpointsAndDefaultInterval) {
  const auto two = make_hypotheses(425, 935, 2);
  EXPECT_EQ(two.at(0, 0), 425.0);
  EXPECT_EQ(two.at(0, 1), 935.0);
  EXPECT_NEAR(make_hypotheses(425, 935, 192).interval(), 510.0 / 191.0, 1e-12);
}

}  // namespace
}  // namespace pmvs
