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
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "patchmvs/common.hpp"

namespace pmvs {

// Pixel centers sit at integer coordinates; a pixel p is promoted to
// (x, y, 1) before applying K^-1.
class CameraView {
 public:
  // Number of samples implied by a cam file that only carries
  // `d_min interval`.
  static constexpr int kDefaultDepthCount = 192;

  CameraView() = default;

  // `interval` and `depth_count` are bookkeeping for the cam-file format;
  // when `interval` is 0 it is derived as (d_max - d_min) / (count - 1).
  CameraView(const Mat3& intrinsic, const Mat4& pose, int width, int height,
             double d_min, double d_max, double interval = 0.0,
             int depth_count = kDefaultDepthCount)
      : intrinsic_(intrinsic),
        pose_(pose),
        width_(width),
        height_(height),
        d_min_(d_min),
        d_max_(d_max),
        interval_(interval),
        depth_count_(depth_count) {
    require(width > 0 && height > 0, "camera: image size must be positive");
    require(intrinsic(0, 0) > 0.0 && intrinsic(1, 1) > 0.0,
            "camera: focal lengths must be positive");
    require(intrinsic(1, 0) == 0.0 && intrinsic(2, 0) == 0.0 &&
                intrinsic(2, 1) == 0.0 && intrinsic(2, 2) == 1.0,
            "camera: intrinsic must be upper-triangular with K(2,2) = 1");
    require(d_min > 0.0 && d_min < d_max, "camera: need 0 < d_min < d_max");
    require(depth_count >= 2, "camera: depth count must be >= 2");
    const Mat3 r = pose.topLeftCorner<3, 3>();
    require((r * r.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-9,
            "camera: rotation is not orthonormal");
    require(std::abs(r.determinant() - 1.0) <= 1e-9,
            "camera: rotation determinant must be +1");
    require(pose(3, 0) == 0.0 && pose(3, 1) == 0.0 && pose(3, 2) == 0.0 &&
                pose(3, 3) == 1.0,
            "camera: pose must be a rigid 4x4 transform");
    if (interval_ <= 0.0) interval_ = (d_max_ - d_min_) / (depth_count_ - 1);
    intrinsic_inv_ = intrinsic_.inverse();
  }

  const Mat3& intrinsic() const { return intrinsic_; }
  const Mat3& intrinsic_inverse() const { return intrinsic_inv_; }
  const Mat4& pose() const { return pose_; }
  Mat3 rotation() const { return pose_.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return pose_.topRightCorner<3, 1>(); }
  Vec3 center() const { return -rotation().transpose() * translation(); }
  int width() const { return width_; }
  int height() const { return height_; }
  double d_min() const { return d_min_; }
  double d_max() const { return d_max_; }
  double interval() const { return interval_; }
  int depth_count() const { return depth_count_; }

  bool in_bounds(const Vec2& p) const {
    return p.x() >= 0.0 && p.y() >= 0.0 && p.x() <= width_ - 1 &&
           p.y() <= height_ - 1;
  }

  // Camera for an image box-filtered by an integer `factor` (each output
  // pixel averages a factor x factor block), keeping pixel centers aligned.
  CameraView downscaled(int factor) const {
    require(factor >= 1, "camera: downscale factor must be >= 1");
    require(width_ % factor == 0 && height_ % factor == 0,
            "camera: downscale factor must divide the image size");
    Mat3 k = intrinsic_;
    const double s = 1.0 / factor;
    k(0, 0) *= s;
    k(0, 1) *= s;
    k(1, 1) *= s;
    k(0, 2) = (k(0, 2) + 0.5) * s - 0.5;
    k(1, 2) = (k(1, 2) + 0.5) * s - 0.5;
    return CameraView(k, pose_, width_ / factor, height_ / factor, d_min_,
                      d_max_, interval_, depth_count_);
  }

  CameraView with_depth_range(double d_min, double d_max) const {
    return CameraView(intrinsic_, pose_, width_, height_, d_min, d_max);
  }

 private:
  Mat3 intrinsic_ = Mat3::Identity();
  Mat3 intrinsic_inv_ = Mat3::Identity();
  Mat4 pose_ = Mat4::Identity();
  int width_ = 1;
  int height_ = 1;
  double d_min_ = 1.0;
  double d_max_ = 2.0;
  double interval_ = 1.0 / (kDefaultDepthCount - 1);
  int depth_count_ = kDefaultDepthCount;
};

// Result of mapping a point into a camera. `depth` is the z coordinate in
// that camera's frame.
struct PixelWarp {
  Vec2 coords = Vec2::Zero();
  double depth = 0.0;
  bool valid = false;
};

// Warps at or behind this depth are flagged invalid.
inline constexpr double kMinWarpDepth = 1e-9;

inline Vec3 back_project(const CameraView& view, const Vec2& p, double d) {
  if (!(d > 0.0)) throw std::invalid_argument("back_project: depth must be positive");
  const Vec3 cam = view.intrinsic_inverse() * Vec3(p.x() * d, p.y() * d, d);
  return view.rotation().transpose() * (cam - view.translation());
}

inline PixelWarp project(const CameraView& view, const Vec3& world) {
  const Vec3 cam = view.rotation() * world + view.translation();
  PixelWarp out;
  out.depth = cam.z();
  if (!(cam.z() > kMinWarpDepth)) return out;
  const Vec3 h = view.intrinsic() * cam;
  out.coords = Vec2(h.x() / h.z(), h.y() / h.z());
  out.valid = true;
  return out;
}

// Precomputed reference-to-source mapping: for pixel p and depth d the
// source-side homogeneous point is d * M * (x, y, 1) + b, with
// M = K_src R_src R_ref^T K_ref^-1 and b = K_src (t_src - R_src R_ref^T t_ref).
class PairWarper {
 public:
  PairWarper(const CameraView& ref, const CameraView& src) {
    const Mat3 r_rel = src.rotation() * ref.rotation().transpose();
    m_ = src.intrinsic() * r_rel * ref.intrinsic_inverse();
    b_ = src.intrinsic() * (src.translation() - r_rel * ref.translation());
  }

  PixelWarp warp(const Vec2& p, double d) const {
    Vec2 unused;
    return warp(p, d, unused);
  }

  // Also reports d(coords)/d(depth).
  PixelWarp warp(const Vec2& p, double d, Vec2& dcoords_dd) const {
    const Vec3 a = m_ * Vec3(p.x(), p.y(), 1.0);
    const Vec3 h = d * a + b_;
    PixelWarp out;
    out.depth = h.z();
    dcoords_dd.setZero();
    if (!(h.z() > kMinWarpDepth)) return out;
    const double inv = 1.0 / h.z();
    out.coords = Vec2(h.x() / h.z(), h.y() / h.z());
    dcoords_dd = Vec2((a.x() * h.z() - h.x() * a.z()) * inv * inv,
                      (a.y() * h.z() - h.y() * a.z()) * inv * inv);
    out.valid = true;
    return out;
  }

 private:
  Mat3 m_;
  Vec3 b_;
};

inline PixelWarp warp_pixel(const CameraView& ref, const CameraView& src,
                            const Vec2& p, double d) {
  return PairWarper(ref, src).warp(p, d);
}

// Every member q = p + offset is warped with the center depth `d`
// (fronto-parallel local plane).
inline std::vector<PixelWarp> warp_patch(const CameraView& ref,
                                         const CameraView& src, const Vec2& p,
                                         std::span<const Vec2> offsets, double d) {
  const PairWarper warper(ref, src);
  std::vector<PixelWarp> out;
  out.reserve(offsets.size());
  for (const Vec2& o : offsets) out.push_back(warper.warp(p + o, d));
  return out;
}

// Row-major offsets of an m x m window centered on the origin.
inline std::vector<Vec2> patch_offsets(int m) {
  require(m >= 1 && m % 2 == 1, "patch size must be odd and >= 1");
  const int r = m / 2;
  std::vector<Vec2> out;
  out.reserve(static_cast<std::size_t>(m) * m);
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) out.emplace_back(dx, dy);
  return out;
}

}  // namespace pmvs
