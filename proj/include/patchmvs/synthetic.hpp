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

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <tuple>
#include <vector>

#include "patchmvs/fusion.hpp"
#include "patchmvs/geometry.hpp"
#include "patchmvs/image.hpp"
#include "patchmvs/losses.hpp"
#include "patchmvs/plane_sweep.hpp"
#include "patchmvs/view_selection.hpp"

namespace pmvs {

struct TextureSpec {
  double contrast = 1.0;        // 1 = full range, 0.02 = weak texture
  double cell = 60.0;           // coarsest value-noise cell, scene units
  int octaves = 3;
  Vec3 tint = Vec3(0.9, 0.75, 0.55);
};

// Plane: points x with normal . (x - point) = 0. Sphere: |x - center| = radius.
// An optional half-space clip keeps only points with coord[clip_axis] on the
// chosen side of clip_value.
struct Surface {
  enum class Kind { kPlane, kSphere };
  Kind kind = Kind::kPlane;
  Vec3 point = Vec3(0, 0, 600);
  Vec3 normal = Vec3(0, 0, -1);
  Vec3 center = Vec3::Zero();
  double radius = 0.0;
  int clip_axis = -1;
  double clip_value = 0.0;
  bool keep_below = true;
  TextureSpec texture;

  static Surface plane(const Vec3& point, const Vec3& normal, TextureSpec tex = {}) {
    Surface s;
    s.point = point;
    s.normal = normal.normalized();
    s.texture = tex;
    return s;
  }
  static Surface sphere(const Vec3& center, double radius, TextureSpec tex = {}) {
    Surface s;
    s.kind = Kind::kSphere;
    s.center = center;
    s.radius = radius;
    s.texture = tex;
    return s;
  }
  Surface& clipped(int axis, double value, bool below) {
    clip_axis = axis;
    clip_value = value;
    keep_below = below;
    return *this;
  }
  bool keeps(const Vec3& x) const {
    if (clip_axis < 0) return true;
    return keep_below ? x[clip_axis] < clip_value : x[clip_axis] >= clip_value;
  }
};

struct SceneSpec {
  enum class Rig { kLine, kArc };

  std::uint64_t seed = 7;
  Rig rig = Rig::kLine;
  int camera_count = 5;
  double baseline = 48.0;         // line rig spacing
  double arc_radius = 700.0;      // arc rig: distance to the look-at point
  double arc_step_deg = 4.0;      // arc rig: angle between neighbours
  Vec3 look_at = Vec3(0, 0, 700);
  int width = 64;
  int height = 64;
  double focal = 100.0;
  double d_min = 425.0;
  double d_max = 935.0;
  std::vector<Surface> surfaces;
  Vec3 light = Vec3(0.3, -0.2, -1.0);  // direction towards the light
  double ambient = 0.3;
  double gain_min = 1.0;
  double gain_max = 1.0;
  double noise_sigma = 0.0;
  int track_count = 300;
  double weak_variance_threshold = 1e-4;
  int gt_min_views = 2;

  void validate() const {
    require(camera_count >= 2, "scene: need at least two cameras");
    require(width >= 4 && height >= 4 && focal > 0.0, "scene: bad image geometry");
    require(d_min > 0.0 && d_max > d_min, "scene: bad depth range");
    require(!surfaces.empty(), "scene: no surfaces");
    require(gain_min > 0.0 && gain_max >= gain_min, "scene: bad gain range");
    require(noise_sigma >= 0.0 && gt_min_views >= 1, "scene: bad noise or visibility setting");
    for (const auto& s : surfaces) {
      require(s.texture.cell > 0.0 && s.texture.octaves >= 1, "scene: bad texture");
      if (s.kind == Surface::Kind::kSphere) require(s.radius > 0.0, "scene: bad sphere radius");
    }
  }

  // Two fronto-parallel planes split along the baseline direction, so
  // neither occludes the other from any camera of the line rig.
  static SceneSpec two_plane(std::uint64_t seed = 7) {
    SceneSpec s;
    s.seed = seed;
    TextureSpec near_tex, far_tex;
    far_tex.tint = Vec3(0.55, 0.8, 0.9);
    s.surfaces.push_back(Surface::plane(Vec3(0, 0, 600), Vec3(0, 0, -1), near_tex).clipped(1, 0.0, true));
    s.surfaces.push_back(Surface::plane(Vec3(0, 0, 800), Vec3(0, 0, -1), far_tex).clipped(1, 0.0, false));
    return s;
  }

  // The far plane carries 2% contrast and every view 8-bit-equivalent noise.
  static SceneSpec weak_texture(std::uint64_t seed = 7) {
    SceneSpec s = two_plane(seed);
    s.surfaces[1].texture.contrast = 0.02;
    s.noise_sigma = 1.0 / 255.0;
    return s;
  }
};

struct SceneBundle {
  SceneSpec spec;
  std::vector<View> views;
  std::vector<DepthMap> gt_depths;
  SparseTrackSet tracks;
  PointCloud gt_cloud;
  std::vector<double> gains;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline double lattice_value(std::uint64_t seed, std::int64_t x, std::int64_t y, std::int64_t z) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(x));
  h = splitmix64(h ^ static_cast<std::uint64_t>(y));
  h = splitmix64(h ^ static_cast<std::uint64_t>(z));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double fade(double t) { return t * t * (3 - 2 * t); }

inline double value_noise(std::uint64_t seed, const Vec3& p) {
  const double fx = std::floor(p.x()), fy = std::floor(p.y()), fz = std::floor(p.z());
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy),
             iz = static_cast<std::int64_t>(fz);
  const double tx = fade(p.x() - fx), ty = fade(p.y() - fy), tz = fade(p.z() - fz);
  double acc = 0.0;
  for (int c = 0; c < 8; ++c) {
    const int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
    const double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
    acc += w * lattice_value(seed, ix + dx, iy + dy, iz + dz);
  }
  return acc;
}

// Multi-octave noise in [0, 1].
inline double fractal_noise(std::uint64_t seed, const Vec3& p, const TextureSpec& t) {
  double sum = 0.0, norm = 0.0, amp = 1.0, cell = t.cell;
  for (int o = 0; o < t.octaves; ++o) {
    sum += amp * value_noise(seed + 1000003ULL * o, p / cell);
    norm += amp;
    amp *= 0.5;
    cell *= 0.5;
  }
  return sum / norm;
}

struct Hit {
  double t;
  int surface;
  Vec3 point;
};

// Ray origin + t * dir; the nearest kept intersection with t > 0.
inline std::optional<Hit> cast_ray(const SceneSpec& spec, const Vec3& origin, const Vec3& dir) {
  std::optional<Hit> best;
  const auto consider = [&](double t, int k) {
    if (!(t > 0.0)) return;
    const Vec3 x = origin + t * dir;
    if (!spec.surfaces[k].keeps(x)) return;
    if (!best || t < best->t) best = Hit{t, k, x};
  };
  for (int k = 0; k < static_cast<int>(spec.surfaces.size()); ++k) {
    const Surface& s = spec.surfaces[k];
    if (s.kind == Surface::Kind::kPlane) {
      const double den = s.normal.dot(dir);
      if (den == 0.0) continue;
      consider(s.normal.dot(s.point - origin) / den, k);
    } else {
      const Vec3 oc = origin - s.center;
      const double b = oc.dot(dir), a = dir.squaredNorm();
      const double disc = b * b - a * (oc.squaredNorm() - s.radius * s.radius);
      if (disc < 0.0) continue;
      const double r = std::sqrt(disc);
      consider((-b - r) / a, k);
      consider((-b + r) / a, k);
    }
  }
  return best;
}

inline Vec3 surface_normal(const Surface& s, const Vec3& x) {
  return s.kind == Surface::Kind::kPlane ? s.normal : (x - s.center).normalized();
}

// Ray through pixel p whose camera-frame z component is 1, so the hit
// parameter equals the depth.
inline Vec3 pixel_ray(const CameraView& v, const Vec2& p) {
  return v.rotation().transpose() * (v.intrinsic_inverse() * Vec3(p.x(), p.y(), 1.0));
}

}  // namespace detail

inline std::vector<CameraView> make_rig(const SceneSpec& spec) {
  Mat3 k = Mat3::Identity();
  k(0, 0) = k(1, 1) = spec.focal;
  k(0, 2) = 0.5 * (spec.width - 1);
  k(1, 2) = 0.5 * (spec.height - 1);
  std::vector<CameraView> out;
  const double mid = 0.5 * (spec.camera_count - 1);
  for (int i = 0; i < spec.camera_count; ++i) {
    Mat4 pose = Mat4::Identity();
    if (spec.rig == SceneSpec::Rig::kLine) {
      const Vec3 c((i - mid) * spec.baseline, 0.0, 0.0);
      pose.topRightCorner<3, 1>() = -c;
    } else {
      const double a = (i - mid) * spec.arc_step_deg * std::numbers::pi / 180.0;
      const Vec3 c = spec.look_at + spec.arc_radius * Vec3(std::sin(a), 0.0, -std::cos(a));
      const Vec3 z = (spec.look_at - c).normalized();
      const Vec3 x = Vec3(0, 1, 0).cross(z).normalized();
      const Vec3 y = z.cross(x);
      Mat3 r;
      r.row(0) = x.transpose();
      r.row(1) = y.transpose();
      r.row(2) = z.transpose();
      pose.topLeftCorner<3, 3>() = r;
      pose.topRightCorner<3, 1>() = -r * c;
    }
    out.emplace_back(k, pose, spec.width, spec.height, spec.d_min, spec.d_max);
  }
  return out;
}

// True if `x` is the first surface hit along the ray from camera `v`, and
// it projects inside the image.
inline bool point_visible(const SceneSpec& spec, const CameraView& v, const Vec3& x) {
  const PixelWarp pw = project(v, x);
  if (!pw.valid || !v.in_bounds(pw.coords)) return false;
  const Vec3 c = v.center();
  const auto hit = detail::cast_ray(spec, c, x - c);
  return hit && std::abs(hit->t - 1.0) <= 1e-9;
}

inline double surface_radiance(const SceneSpec& spec, int surface, const Vec3& x, int channel) {
  const Surface& s = spec.surfaces[surface];
  const double n = detail::fractal_noise(spec.seed * 31 + static_cast<std::uint64_t>(surface), x,
                                         s.texture);
  const double albedo = 0.5 + s.texture.contrast * (n - 0.5);
  Vec3 normal = detail::surface_normal(s, x);
  const Vec3 l = spec.light.normalized();
  const double shade = spec.ambient + (1.0 - spec.ambient) * std::abs(normal.dot(l));
  return s.texture.tint[channel] * shade * albedo;
}

inline SceneBundle generate_scene(const SceneSpec& spec) {
  spec.validate();
  SceneBundle b;
  b.spec = spec;
  const auto cams = make_rig(spec);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> gain_dist(spec.gain_min, spec.gain_max);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<int> seen(spec.surfaces.size(), 0);
  for (const CameraView& cam : cams) {
    const double gain = spec.gain_max > spec.gain_min ? gain_dist(rng) : spec.gain_min;
    b.gains.push_back(gain);
    Image img(3, spec.width, spec.height);
    DepthMap gt(spec.width, spec.height);
    const Vec3 c = cam.center();
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        const auto hit = detail::cast_ray(spec, c, detail::pixel_ray(cam, Vec2(x, y)));
        if (!hit) continue;
        if (hit->t < spec.d_min || hit->t > spec.d_max)
          throw std::invalid_argument("generate_scene: surface outside the depth range");
        const std::size_t i = static_cast<std::size_t>(y) * spec.width + x;
        gt.depth[i] = hit->t;
        gt.confidence[i] = 1.0;
        gt.mask.set(i, true);
        ++seen[hit->surface];
        for (int ch = 0; ch < 3; ++ch)
          img.at(ch, x, y) = gain * surface_radiance(spec, hit->surface, hit->point, ch);
      }
    if (spec.noise_sigma > 0.0)
      for (double& v : img.data()) v += spec.noise_sigma * noise(rng);
    // Float-representable samples survive the float32 image files unchanged.
    for (double& v : img.data()) v = static_cast<float>(v);
    b.views.push_back(View{std::move(img), cam});
    b.gt_depths.push_back(std::move(gt));
  }
  for (int s : seen)
    if (s == 0) throw std::invalid_argument("generate_scene: a surface is not visible from any camera");

  // Sparse tracks from random ground-truth pixels.
  std::uniform_int_distribution<int> view_dist(0, spec.camera_count - 1);
  std::uniform_int_distribution<int> x_dist(0, spec.width - 1), y_dist(0, spec.height - 1);
  for (int attempt = 0; attempt < spec.track_count * 4 &&
                        static_cast<int>(b.tracks.points.size()) < spec.track_count;
       ++attempt) {
    const int v = view_dist(rng), x = x_dist(rng), y = y_dist(rng);
    if (!b.gt_depths[v].valid(x, y)) continue;
    const Vec3 p = back_project(cams[v], Vec2(x, y), b.gt_depths[v].at(x, y));
    std::vector<int> vis;
    for (int u = 0; u < spec.camera_count; ++u)
      if (u == v || point_visible(spec, cams[u], p)) vis.push_back(u);
    if (vis.size() < 2) continue;
    b.tracks.points.push_back(p);
    b.tracks.visibility.push_back(std::move(vis));
  }

  // Observable ground truth: every GT pixel's surface point seen by at least
  // gt_min_views cameras, with coincident points kept once.
  std::map<std::tuple<std::int64_t, std::int64_t, std::int64_t>, int> taken;
  for (int v = 0; v < spec.camera_count; ++v) {
    const DepthMap& gt = b.gt_depths[v];
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        if (!gt.valid(x, y)) continue;
        const Vec3 p = back_project(cams[v], Vec2(x, y), gt.at(x, y));
        const auto key = std::make_tuple(std::llround(p.x() * 1e4), std::llround(p.y() * 1e4),
                                         std::llround(p.z() * 1e4));
        if (taken.count(key)) continue;
        int n = 1;
        for (int u = 0; u < spec.camera_count; ++u)
          if (u != v && point_visible(spec, cams[u], p)) ++n;
        if (n < spec.gt_min_views) continue;
        taken.emplace(key, 1);
        Vec3 color;
        for (int ch = 0; ch < 3; ++ch) color[ch] = std::clamp(b.views[v].image.at(ch, x, y), 0.0, 1.0);
        b.gt_cloud.add(p, color, n);
      }
  }
  return b;
}

// Pixels whose 3x3 (border-clamped) gray-level variance is below `threshold`.
inline ValidMask weak_texture_mask(const Image& img, double threshold) {
  const Image g = grayscale(img);
  const int w = g.width(), h = g.height();
  ValidMask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0, ss = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const double v = g.at(0, clamp_index(x + dx, w), clamp_index(y + dy, h));
          s += v;
          ss += v * v;
        }
      const double mean = s / 9.0;
      m.set(x, y, ss / 9.0 - mean * mean < threshold);
    }
  return m;
}

inline ValidMask weak_texture_mask(const SceneBundle& b, int view) {
  require(view >= 0 && view < static_cast<int>(b.views.size()), "weak_texture_mask: no such view");
  return weak_texture_mask(b.views[view].image, b.spec.weak_variance_threshold);
}

}  // namespace pmvs
