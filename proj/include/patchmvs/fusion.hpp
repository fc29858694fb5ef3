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
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "patchmvs/geometry.hpp"
#include "patchmvs/image.hpp"
#include "patchmvs/plane_sweep.hpp"

namespace pmvs {

struct FusionConfig {
  double max_reprojection_px = 1.0;
  double max_relative_depth = 0.01;
  int min_views = 3;  // N2, counting the reference itself

  void validate() const {
    require(max_reprojection_px > 0.0 && max_relative_depth > 0.0,
            "fusion: thresholds must be positive");
    require(min_views >= 1, "fusion: min_views must be >= 1");
  }
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> colors;  // RGB in [0, 1]
  std::vector<int> support;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  void add(const Vec3& p, const Vec3& c, int s = 1) {
    points.push_back(p);
    colors.push_back(c);
    support.push_back(s);
  }
};

// One view's estimate. `image` is optional and only used for colors.
struct DepthView {
  int id = 0;
  const DepthMap* depth = nullptr;
  CameraView camera;
  const Image* image = nullptr;
};

struct Correspondence {
  int x = 0, y = 0;
  double depth = 0.0;
};

// Checks pixel (x, y) of `ref` with depth d against `other`: the warp must
// land inside `other`, the nearest pixel's depth must agree with the warped
// depth within the relative threshold, and that pixel re-projected back must
// land within the pixel threshold of (x, y).
inline std::optional<Correspondence> check_consistency(const CameraView& ref, int x, int y,
                                                       double d, const DepthView& other,
                                                       const FusionConfig& cfg) {
  const PixelWarp pw = warp_pixel(ref, other.camera, Vec2(x, y), d);
  if (!pw.valid || !other.camera.in_bounds(pw.coords)) return std::nullopt;
  const int qx = static_cast<int>(std::lround(pw.coords.x()));
  const int qy = static_cast<int>(std::lround(pw.coords.y()));
  if (!other.depth->valid(qx, qy)) return std::nullopt;
  const double dq = other.depth->at(qx, qy);
  if (std::abs(dq - pw.depth) > cfg.max_relative_depth * pw.depth) return std::nullopt;
  const PixelWarp back = warp_pixel(other.camera, ref, Vec2(qx, qy), dq);
  if (!back.valid || (back.coords - Vec2(x, y)).norm() > cfg.max_reprojection_px)
    return std::nullopt;
  return Correspondence{qx, qy, dq};
}

// Number of other views agreeing with each valid reference pixel.
inline std::vector<int> consistency_count(const DepthView& ref, std::span<const DepthView> others,
                                          const FusionConfig& cfg) {
  cfg.validate();
  if (others.empty()) throw std::invalid_argument("consistency_count: need at least one other view");
  const DepthMap& dm = *ref.depth;
  std::vector<int> count(dm.depth.size(), 0);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < dm.height; ++y)
    for (int x = 0; x < dm.width; ++x) {
      if (!dm.valid(x, y)) continue;
      int n = 0;
      for (const auto& o : others)
        if (check_consistency(ref.camera, x, y, dm.at(x, y), o, cfg)) ++n;
      count[static_cast<std::size_t>(y) * dm.width + x] = n;
    }
  return count;
}

// Views are visited by ascending id. A pixel with at least N2 - 1 agreeing
// views emits the mean of its own and the agreeing back-projections, colored
// by the pixel itself; the agreeing pixels are then consumed.
inline PointCloud fuse_point_cloud(std::span<const DepthView> views, const FusionConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> order(views.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return views[a].id < views[b].id;
  });
  std::vector<std::vector<std::uint8_t>> consumed(views.size());
  for (std::size_t v = 0; v < views.size(); ++v)
    consumed[v].assign(views[v].depth->depth.size(), 0);

  PointCloud cloud;
  std::vector<std::pair<std::size_t, Correspondence>> matches;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t v = order[oi];
    const DepthView& ref = views[v];
    const DepthMap& dm = *ref.depth;
    for (int y = 0; y < dm.height; ++y)
      for (int x = 0; x < dm.width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * dm.width + x;
        if (!dm.mask[i] || consumed[v][i]) continue;
        matches.clear();
        for (std::size_t oj = 0; oj < order.size(); ++oj) {
          const std::size_t u = order[oj];
          if (u == v) continue;
          if (auto c = check_consistency(ref.camera, x, y, dm.depth[i], views[u], cfg))
            matches.emplace_back(u, *c);
        }
        if (static_cast<int>(matches.size()) + 1 < cfg.min_views) continue;
        Vec3 sum = back_project(ref.camera, Vec2(x, y), dm.depth[i]);
        for (const auto& [u, c] : matches) {
          sum += back_project(views[u].camera, Vec2(c.x, c.y), c.depth);
          consumed[u][static_cast<std::size_t>(c.y) * views[u].depth->width + c.x] = 1;
        }
        consumed[v][i] = 1;
        Vec3 color(0.5, 0.5, 0.5);
        if (ref.image) {
          const Image& im = *ref.image;
          for (int c = 0; c < 3; ++c)
            color[c] = std::clamp(im.at(std::min(c, im.channels() - 1), x, y), 0.0, 1.0);
        }
        cloud.add(sum / static_cast<double>(matches.size() + 1), color,
                  static_cast<int>(matches.size()) + 1);
      }
  }
  return cloud;
}

struct CloudMetrics {
  double accuracy = 0.0;
  double completeness = 0.0;
  double overall = 0.0;
};

// Exact nearest-neighbour distance capped at `cap`, on a uniform grid with
// cell size `cap`.
class CappedNearest {
 public:
  CappedNearest(const std::vector<Vec3>& points, double cap) : points_(&points), cap_(cap) {
    require(cap > 0.0, "evaluate: distance cap must be positive");
    for (std::size_t i = 0; i < points.size(); ++i) cells_[key(cell_of(points[i]))].push_back(i);
  }

  double distance(const Vec3& q) const {
    const auto c = cell_of(q);
    double best = cap_ * cap_;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == cells_.end()) continue;
          for (std::size_t i : it->second) best = std::min(best, ((*points_)[i] - q).squaredNorm());
        }
    return std::sqrt(best);
  }

 private:
  std::array<std::int64_t, 3> cell_of(const Vec3& p) const {
    return {static_cast<std::int64_t>(std::floor(p.x() / cap_)),
            static_cast<std::int64_t>(std::floor(p.y() / cap_)),
            static_cast<std::int64_t>(std::floor(p.z() / cap_))};
  }
  static std::uint64_t key(const std::array<std::int64_t, 3>& c) {
    const auto u = [](std::int64_t v) { return static_cast<std::uint64_t>(v) & 0x1FFFFF; };
    return (u(c[0]) << 42) | (u(c[1]) << 21) | u(c[2]);
  }

  const std::vector<Vec3>* points_;
  double cap_;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> cells_;
};

inline double mean_capped_distance(const std::vector<Vec3>& queries, const std::vector<Vec3>& target,
                                   double cap) {
  const CappedNearest nn(target, cap);
  std::vector<double> d(queries.size());
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < queries.size(); ++i) d[i] = nn.distance(queries[i]);
  double sum = 0.0;
  for (double v : d) sum += v;
  return sum / static_cast<double>(queries.size());
}

inline CloudMetrics evaluate(const PointCloud& cloud, const PointCloud& gt, double cap) {
  if (cloud.empty() || gt.empty()) throw std::invalid_argument("evaluate: empty point cloud");
  CloudMetrics m;
  m.accuracy = mean_capped_distance(cloud.points, gt.points, cap);
  m.completeness = mean_capped_distance(gt.points, cloud.points, cap);
  m.overall = 0.5 * (m.accuracy + m.completeness);
  return m;
}

}  // namespace pmvs
