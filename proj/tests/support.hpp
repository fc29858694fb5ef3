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
#include <random>

#include "patchmvs/patchmvs.hpp"

namespace pmvs::testing {

inline Mat3 intrinsic(double f, double cx, double cy) {
  Mat3 k = Mat3::Identity();
  k(0, 0) = k(1, 1) = f;
  k(0, 2) = cx;
  k(1, 2) = cy;
  return k;
}

inline Mat4 pose_from(const Mat3& r, const Vec3& t) {
  Mat4 p = Mat4::Identity();
  p.topLeftCorner<3, 3>() = r;
  p.topRightCorner<3, 1>() = t;
  return p;
}

inline CameraView simple_camera(int w = 64, int h = 64, double f = 100.0, const Vec3& center = Vec3::Zero()) {
  return CameraView(intrinsic(f, 0.5 * (w - 1), 0.5 * (h - 1)),
                    pose_from(Mat3::Identity(), -center), w, h, 425.0, 935.0);
}

inline Mat3 random_rotation(std::mt19937_64& rng, double max_angle) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-max_angle, max_angle);
  const Vec3 axis = Vec3(n(rng), n(rng), n(rng)).normalized();
  return Eigen::AngleAxisd(u(rng), axis).toRotationMatrix();
}

inline CameraView random_camera(std::mt19937_64& rng, int w = 64, int h = 48) {
  std::uniform_real_distribution<double> f(60.0, 200.0), c(-0.2, 0.2), t(-100.0, 100.0);
  Mat3 k = intrinsic(f(rng), 0.5 * (w - 1) + c(rng) * w, 0.5 * (h - 1) + c(rng) * h);
  k(1, 1) = k(0, 0) * (1.0 + 0.1 * c(rng));
  k(0, 1) = 0.01 * c(rng);
  return CameraView(k, pose_from(random_rotation(rng, 0.3), Vec3(t(rng), t(rng), t(rng))), w, h,
                    100.0, 2000.0);
}

// RMS difference over pixels valid in both maps and inside `region`.
inline double masked_rmse(const DepthMap& a, const DepthMap& b, const ValidMask& region) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.depth.size(); ++i)
    if (region[i] && a.mask[i] && b.mask[i]) {
      s += (a.depth[i] - b.depth[i]) * (a.depth[i] - b.depth[i]);
      ++n;
    }
  return n ? std::sqrt(s / static_cast<double>(n)) : 0.0;
}

inline DepthMap add_noise(DepthMap d, double amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  for (std::size_t i = 0; i < d.depth.size(); ++i)
    if (d.mask[i]) d.depth[i] += u(rng);
  return d;
}

inline Image random_image(std::mt19937_64& rng, int c, int w, int h) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(c, w, h);
  for (double& v : img.data()) v = u(rng);
  return img;
}

inline SceneSpec small_scene(int size, std::uint64_t seed = 7) {
  SceneSpec s = SceneSpec::two_plane(seed);
  s.focal *= static_cast<double>(size) / s.width;
  s.width = s.height = size;
  return s;
}

}  // namespace pmvs::testing
