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
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "patchmvs/geometry.hpp"

namespace pmvs {

// Sparse SfM-style tracks: points[i] is observed by the view ids in
// visibility[i].
struct SparseTrackSet {
  std::vector<Vec3> points;
  std::vector<std::vector<int>> visibility;
};

struct ViewRanking {
  int ref = -1;
  std::vector<std::pair<int, double>> sources;  // descending score
};

// Piecewise Gaussian preference over the triangulation angle (degrees).
struct AngleWeight {
  double peak_deg = 5.0;
  double sigma_below_deg = 1.0;
  double sigma_above_deg = 10.0;

  double operator()(double theta_deg) const {
    const double s = theta_deg <= peak_deg ? sigma_below_deg : sigma_above_deg;
    const double t = theta_deg - peak_deg;
    return std::exp(-t * t / (2.0 * s * s));
  }
};

inline double triangulation_angle_deg(const Vec3& point, const Vec3& c1, const Vec3& c2) {
  const Vec3 a = c1 - point, b = c2 - point;
  const double cosv = std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0);
  return std::acos(cosv) * 180.0 / std::numbers::pi;
}

inline double covisibility_score(const CameraView& ref, int ref_id, const CameraView& src,
                                 int src_id, const SparseTrackSet& tracks,
                                 const AngleWeight& weight = {}) {
  const Vec3 c1 = ref.center(), c2 = src.center();
  double score = 0.0;
  for (std::size_t i = 0; i < tracks.points.size(); ++i) {
    const auto& vis = tracks.visibility[i];
    const bool has_ref = std::find(vis.begin(), vis.end(), ref_id) != vis.end();
    if (!has_ref || std::find(vis.begin(), vis.end(), src_id) == vis.end()) continue;
    score += weight(triangulation_angle_deg(tracks.points[i], c1, c2));
  }
  return score;
}

// Sources for `ref_id` ordered by descending score, ties by ascending id.
// `views` is indexed by view id. Returns at most `n` entries.
inline ViewRanking rank_sources(int ref_id, std::span<const int> candidates,
                                std::span<const CameraView> views,
                                const SparseTrackSet& tracks, std::size_t n) {
  require(n >= 1, "rank_sources: n must be >= 1");
  ViewRanking r;
  r.ref = ref_id;
  for (int id : candidates) {
    if (id == ref_id) continue;
    r.sources.emplace_back(id, covisibility_score(views[ref_id], ref_id, views[id], id, tracks));
  }
  std::sort(r.sources.begin(), r.sources.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (r.sources.size() > n) r.sources.resize(n);
  return r;
}

inline int select_best_source(int ref_id, std::span<const int> candidates,
                              std::span<const CameraView> views, const SparseTrackSet& tracks) {
  if (candidates.empty()) throw std::invalid_argument("select_best_source: no candidates");
  const ViewRanking r = rank_sources(ref_id, candidates, views, tracks, 1);
  if (r.sources.empty()) throw std::invalid_argument("select_best_source: no candidates");
  return r.sources.front().first;
}

}  // namespace pmvs
