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

#include "patchmvs/image.hpp"

namespace pmvs {

// Deterministic image -> feature map transform. The output grid is the
// input grid box-downsampled by `downscale()`.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual Image extract(const Image& img) const = 0;
  virtual int downscale() const = 0;
  virtual int channels(int input_channels) const = 0;
  // Feature pixels closer than this to the image edge see clamped input.
  virtual int border() const { return 0; }
};

class IdentityExtractor final : public FeatureExtractor {
 public:
  Image extract(const Image& img) const override { return img; }
  int downscale() const override { return 1; }
  int channels(int input_channels) const override { return input_channels; }
};

// Non-learned local-structure descriptor on the half-resolution gray image:
// intensity, d/dx, d/dy, Laplacian, d2/dx2 - d2/dy2 and d2/dxdy.
class GradientFeatureExtractor final : public FeatureExtractor {
 public:
  explicit GradientFeatureExtractor(int downscale = 2) : downscale_(downscale) {
    require(downscale >= 1, "feature extractor: downscale must be >= 1");
  }

  Image extract(const Image& img) const override {
    const Image gray = downsample_box(grayscale(img), downscale_);
    const int w = gray.width(), h = gray.height();
    Image out(6, w, h);
    for (int y = 0; y < h; ++y) {
      const int ym = clamp_index(y - 1, h), yp = clamp_index(y + 1, h);
      for (int x = 0; x < w; ++x) {
        const int xm = clamp_index(x - 1, w), xp = clamp_index(x + 1, w);
        const double v = gray.at(0, x, y);
        const double dxx = gray.at(0, xp, y) - 2 * v + gray.at(0, xm, y);
        const double dyy = gray.at(0, x, yp) - 2 * v + gray.at(0, x, ym);
        out.at(0, x, y) = v;
        out.at(1, x, y) = 0.5 * (gray.at(0, xp, y) - gray.at(0, xm, y));
        out.at(2, x, y) = 0.5 * (gray.at(0, x, yp) - gray.at(0, x, ym));
        out.at(3, x, y) = dxx + dyy;
        out.at(4, x, y) = dxx - dyy;
        out.at(5, x, y) = 0.25 * (gray.at(0, xp, yp) - gray.at(0, xm, yp) -
                                  gray.at(0, xp, ym) + gray.at(0, xm, ym));
      }
    }
    return out;
  }
  int downscale() const override { return downscale_; }
  int channels(int) const override { return 6; }
  int border() const override { return 1; }

 private:
  int downscale_;
};

}  // namespace pmvs
