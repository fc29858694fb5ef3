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

using testing::simple_camera;

TEST(AngleWeight, PeakAndAsymmetricFalloff) {
  const AngleWeight w;
  EXPECT_DOUBLE_EQ(w(5.0), 1.0);
  EXPECT_NEAR(w(4.0), std::exp(-0.5), 1e-15);
  EXPECT_NEAR(w(15.0), std::exp(-0.5), 1e-15);
  EXPECT_LT(w(3.0), w(7.0));
}

TEST(Triangulation, RightAngle) {
  EXPECT_NEAR(triangulation_angle_deg(Vec3::Zero(), Vec3(1, 0, 0), Vec3(0, 5, 0)), 90.0, 1e-12);
  EXPECT_NEAR(triangulation_angle_deg(Vec3(0, 0, 10), Vec3(-1, 0, 0), Vec3(1, 0, 0)),
              2 * std::atan(0.1) * 180 / M_PI, 1e-12);
}

TEST(Covisibility, SumsWeightsOfSharedTracksOnly) {
  const std::vector<CameraView> cams = {simple_camera(), simple_camera(64, 64, 100, Vec3(50, 0, 0)),
                                        simple_camera(64, 64, 100, Vec3(200, 0, 0))};
  SparseTrackSet t;
  t.points = {Vec3(0, 0, 600), Vec3(10, 0, 600), Vec3(0, 5, 700)};
  t.visibility = {{0, 1}, {0, 1, 2}, {1, 2}};
  const AngleWeight w;
  const double expect = w(triangulation_angle_deg(t.points[0], cams[0].center(), cams[1].center())) +
                        w(triangulation_angle_deg(t.points[1], cams[0].center(), cams[1].center()));
  EXPECT_NEAR(covisibility_score(cams[0], 0, cams[1], 1, t), expect, 1e-15);
  EXPECT_NEAR(covisibility_score(cams[0], 0, cams[2], 2, t),
              w(triangulation_angle_deg(t.points[1], cams[0].center(), cams[2].center())), 1e-15);
  EXPECT_EQ(covisibility_score(cams[0], 0, cams[1], 1, SparseTrackSet{}), 0.0);
}

TEST(Ranking, DescendingScoreThenId) {
  const std::vector<CameraView> cams = {simple_camera(), simple_camera(64, 64, 100, Vec3(52, 0, 0)),
                                        simple_camera(64, 64, 100, Vec3(-52, 0, 0)),
                                        simple_camera(64, 64, 100, Vec3(300, 0, 0))};
  SparseTrackSet t;
  t.points = {Vec3(0, 0, 600), Vec3(0, 0, 600)};
  t.visibility = {{0, 1, 2, 3}, {0, 1, 2, 3}};
  const std::vector<int> ids = {0, 1, 2, 3};
  const ViewRanking r = rank_sources(0, ids, cams, t, 10);
  ASSERT_EQ(r.sources.size(), 3u);
  EXPECT_EQ(r.sources[0].first, 1);  // tie with view 2, lower id first
  EXPECT_EQ(r.sources[1].first, 2);
  EXPECT_EQ(r.sources[2].first, 3);
  EXPECT_DOUBLE_EQ(r.sources[0].second, r.sources[1].second);
  EXPECT_GT(r.sources[1].second, r.sources[2].second);
  EXPECT_EQ(rank_sources(0, ids, cams, t, 2).sources.size(), 2u);
  EXPECT_EQ(select_best_source(0, ids, cams, t), 1);
  EXPECT_THROW(select_best_source(0, std::vector<int>{}, cams, t), std::invalid_argument);
  EXPECT_THROW(rank_sources(0, ids, cams, t, 0), std::invalid_argument);
}

// On the line rig, views two steps away outscore the neighbours: the far
// plane's neighbour angle (about 3.4 degrees) sits on the steep side of the
// weight. Scores must match the covisibility oracle.
TEST(Ranking, SyntheticRigScoresMatchOracle) {
  const SceneBundle b = generate_scene(testing::small_scene(32));
  std::vector<CameraView> cams;
  std::vector<int> ids;
  for (std::size_t i = 0; i < b.views.size(); ++i) {
    cams.push_back(b.views[i].camera);
    ids.push_back(static_cast<int>(i));
  }
  const ViewRanking r = rank_sources(2, ids, cams, b.tracks, 4);
  ASSERT_EQ(r.sources.size(), 4u);
  for (const auto& [id, score] : r.sources)
    EXPECT_DOUBLE_EQ(score, covisibility_score(cams[2], 2, cams[id], id, b.tracks));
  for (std::size_t i = 1; i < r.sources.size(); ++i)
    EXPECT_GE(r.sources[i - 1].second, r.sources[i].second);
  const AngleWeight w;
  const double near_far_plane = triangulation_angle_deg(Vec3(0, 100, 800), cams[2].center(), cams[1].center());
  EXPECT_NEAR(near_far_plane, 3.4, 0.05);
  EXPECT_LT(w(near_far_plane), w(2 * near_far_plane));
  const int first = r.sources[0].first, second = r.sources[1].first;
  EXPECT_TRUE((first == 0 && second == 4) || (first == 4 && second == 0));
}

// With a step wide enough to clear the weight's peak, the nearest view on
// the arc wins.
TEST(Ranking, ArcRigPrefersNearestNeighbour) {
  SceneSpec s = SceneSpec::two_plane(1);
  s.rig = SceneSpec::Rig::kArc;
  s.arc_step_deg = 8.0;
  const SceneBundle b = generate_scene(s);
  std::vector<CameraView> cams;
  std::vector<int> ids;
  for (std::size_t i = 0; i < b.views.size(); ++i) {
    cams.push_back(b.views[i].camera);
    ids.push_back(static_cast<int>(i));
  }
  const ViewRanking r = rank_sources(2, ids, cams, b.tracks, 4);
  ASSERT_EQ(r.sources.size(), 4u);
  EXPECT_TRUE(r.sources[0].first == 1 || r.sources[0].first == 3) << r.sources[0].first;
  EXPECT_TRUE(r.sources[1].first == 1 || r.sources[1].first == 3) << r.sources[1].first;
  EXPECT_EQ(select_best_source(2, ids, cams, b.tracks), r.sources[0].first);
}

TEST(Covisibility, PeakTracksAndOneOffPeak) {
  const CameraView a = simple_camera(), c = simple_camera(64, 64, 100, Vec3(100, 0, 0));
  const double half = 2.5 * M_PI / 180;
  const Vec3 peak(50, 0, 50 / std::tan(half));
  const double half2 = 7.5 * M_PI / 180;
  const Vec3 wide(50, 0, 50 / std::tan(half2));
  SparseTrackSet t;
  t.points = {peak, peak, peak, wide};
  t.visibility = {{0, 1}, {0, 1}, {0, 1}, {0, 1}};
  EXPECT_NEAR(covisibility_score(a, 0, c, 1, t), 3.0 + std::exp(-0.5), 1e-9);
  t.points.resize(1);
  t.visibility.resize(1);
  EXPECT_NEAR(covisibility_score(a, 0, c, 1, t), 1.0, 1e-12);
}

}  // namespace
}  // namespace pmvs
