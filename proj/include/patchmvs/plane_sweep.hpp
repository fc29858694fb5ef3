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
#include <limits>
#include <span>
#include <vector>

#include "patchmvs/geometry.hpp"
#include "patchmvs/image.hpp"

namespace pmvs {

// Ordered depth samples, either shared by every pixel (global) or stored per
// pixel as samples[pixel * count + k].
class DepthHypotheses {
 public:
  DepthHypotheses() = default;

  static DepthHypotheses global(std::vector<double> samples, double interval) {
    DepthHypotheses h;
    h.count_ = static_cast<int>(samples.size());
    h.interval_ = interval;
    h.samples_ = std::move(samples);
    return h;
  }

  static DepthHypotheses per_pixel(int width, int height, int count, double interval,
                                   std::vector<double> samples) {
    require(samples.size() == static_cast<std::size_t>(width) * height * count,
            "hypotheses: sample buffer size mismatch");
    DepthHypotheses h;
    h.width_ = width;
    h.height_ = height;
    h.count_ = count;
    h.interval_ = interval;
    h.samples_ = std::move(samples);
    return h;
  }

  bool is_global() const { return width_ == 0; }
  int count() const { return count_; }
  double interval() const { return interval_; }
  int width() const { return width_; }
  int height() const { return height_; }

  double at(std::size_t pixel, int k) const {
    return is_global() ? samples_[k] : samples_[pixel * count_ + k];
  }
  double front(std::size_t pixel) const { return at(pixel, 0); }
  double back(std::size_t pixel) const { return at(pixel, count_ - 1); }

 private:
  int width_ = 0;
  int height_ = 0;
  int count_ = 0;
  double interval_ = 0.0;
  std::vector<double> samples_;
};

struct CostVolume {
  int width = 0;
  int height = 0;
  int count = 0;
  std::vector<double> cost;          // cost[k * W * H + pixel]
  std::vector<std::uint8_t> valid;   // same indexing

  double at(int k, std::size_t pixel) const {
    return cost[static_cast<std::size_t>(k) * width * height + pixel];
  }
  bool valid_at(int k, std::size_t pixel) const {
    return valid[static_cast<std::size_t>(k) * width * height + pixel] != 0;
  }
};

struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> depth;
  std::vector<double> confidence;
  ValidMask mask;

  DepthMap() = default;
  DepthMap(int w, int h, double fill = 0.0, bool valid = false)
      : width(w), height(h), depth(static_cast<std::size_t>(w) * h, fill),
        confidence(static_cast<std::size_t>(w) * h, 0.0), mask(w, h, valid) {}

  bool empty() const { return depth.empty(); }
  double at(int x, int y) const { return depth[static_cast<std::size_t>(y) * width + x]; }
  bool valid(int x, int y) const { return mask(x, y); }
};

inline DepthHypotheses make_hypotheses(double d_min, double d_max, int n) {
  require(n >= 2, "make_hypotheses: need at least two samples");
  require(d_min > 0.0 && d_max > d_min, "make_hypotheses: degenerate depth range");
  const double step = (d_max - d_min) / (n - 1);
  std::vector<double> s(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) s[k] = d_min + k * step;
  s.back() = d_max;
  return DepthHypotheses::global(std::move(s), step);
}

// Per-pixel span [d - n*interval, d + n*interval] clamped to [d_min, d_max];
// invalid pixels of `prev` sweep the whole range.
inline DepthHypotheses narrow_range(const DepthMap& prev, int n, double interval,
                                    double d_min, double d_max) {
  require(n >= 2, "narrow_range: need at least two samples");
  require(interval > 0.0 && d_max > d_min, "narrow_range: bad interval or range");
  const std::size_t px = static_cast<std::size_t>(prev.width) * prev.height;
  std::vector<double> s(px * n);
  const double half = n * interval;
  for (std::size_t i = 0; i < px; ++i) {
    double lo = d_min, hi = d_max;
    if (prev.mask[i]) {
      const double center = std::clamp(prev.depth[i], d_min, d_max);
      lo = std::max(center - half, d_min);
      hi = std::min(center + half, d_max);
    }
    const double step = (hi - lo) / (n - 1);
    for (int k = 0; k < n; ++k) s[i * n + k] = lo + k * step;
    s[i * n + n - 1] = hi;
  }
  return DepthHypotheses::per_pixel(prev.width, prev.height, n, interval, std::move(s));
}

struct SourceView {
  const Image* features;
  CameraView camera;
};

// Variance-metric cost: for every pixel and hypothesis, each source is warped
// onto the pixel and the cost is the channel-mean of the population variance
// over {reference, valid warped sources}. A hypothesis with no valid source
// is masked out.
inline CostVolume build_cost_volume(const Image& ref, std::span<const SourceView> sources,
                                    const CameraView& ref_view, const DepthHypotheses& hyps) {
  if (sources.empty()) throw std::invalid_argument("build_cost_volume: no sources");
  require(ref.width() == ref_view.width() && ref.height() == ref_view.height(),
          "build_cost_volume: reference features do not match the view");
  require(hyps.is_global() || (hyps.width() == ref.width() && hyps.height() == ref.height()),
          "build_cost_volume: hypothesis grid does not match the view");
  const int w = ref.width(), h = ref.height(), nc = ref.channels();
  const std::size_t px = static_cast<std::size_t>(w) * h;
  std::vector<PairWarper> warpers;
  for (const auto& s : sources) {
    require(s.features->channels() == nc, "build_cost_volume: channel mismatch");
    require(s.features->width() == s.camera.width() && s.features->height() == s.camera.height(),
            "build_cost_volume: source features do not match the view");
    warpers.emplace_back(ref_view, s.camera);
  }
  CostVolume cv{w, h, hyps.count(), std::vector<double>(px * hyps.count(), 0.0),
                std::vector<std::uint8_t>(px * hyps.count(), 0)};

#pragma omp parallel for schedule(static)
  for (int k = 0; k < hyps.count(); ++k) {
    std::vector<double> sum(nc), sum_sq(nc);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        const double d = hyps.at(i, k);
        for (int c = 0; c < nc; ++c) {
          const double v = ref.at(c, x, y);
          sum[c] = v;
          sum_sq[c] = v * v;
        }
        int n = 1;
        for (std::size_t s = 0; s < sources.size(); ++s) {
          const PixelWarp pw = warpers[s].warp(Vec2(x, y), d);
          if (!pw.valid) continue;
          const Image& f = *sources[s].features;
          const auto cell = bilinear_cell(pw.coords.x(), pw.coords.y(), f.width(), f.height());
          if (!cell) continue;
          for (int c = 0; c < nc; ++c) {
            const double v = bilinear_value(f, c, *cell);
            sum[c] += v;
            sum_sq[c] += v * v;
          }
          ++n;
        }
        if (n < 2) continue;
        double cost = 0.0;
        for (int c = 0; c < nc; ++c) {
          const double mean = sum[c] / n;
          cost += std::max(0.0, sum_sq[c] / n - mean * mean);
        }
        const std::size_t j = static_cast<std::size_t>(k) * px + i;
        cv.cost[j] = cost / nc;
        cv.valid[j] = 1;
      }
    }
  }
  return cv;
}

// Softmax over -cost / temperature along the hypothesis axis, then the
// expectation of depth. Confidence is the peak probability.
inline DepthMap regress_depth(const CostVolume& cv, const DepthHypotheses& hyps,
                              double temperature) {
  require(temperature > 0.0, "regress_depth: temperature must be positive");
  require(cv.count == hyps.count(), "regress_depth: hypothesis count mismatch");
  DepthMap out(cv.width, cv.height);
  const std::size_t px = static_cast<std::size_t>(cv.width) * cv.height;
  std::vector<double> logits(static_cast<std::size_t>(cv.count));
  for (std::size_t i = 0; i < px; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < cv.count; ++k) {
      if (!cv.valid_at(k, i)) continue;
      logits[k] = -cv.at(k, i) / temperature;
      best = std::max(best, logits[k]);
    }
    if (!std::isfinite(best)) continue;
    double z = 0.0, num = 0.0, peak = 0.0;
    for (int k = 0; k < cv.count; ++k) {
      if (!cv.valid_at(k, i)) continue;
      const double e = std::exp(logits[k] - best);
      z += e;
      num += e * hyps.at(i, k);
      peak = std::max(peak, e);
    }
    out.depth[i] = std::clamp(num / z, hyps.front(i), hyps.back(i));
    out.confidence[i] = peak / z;
    out.mask.set(i, true);
  }
  return out;
}

// Index of the lowest valid cost per pixel, -1 where all are masked.
inline std::vector<int> argmin_hypothesis(const CostVolume& cv) {
  const std::size_t px = static_cast<std::size_t>(cv.width) * cv.height;
  std::vector<int> out(px, -1);
  for (std::size_t i = 0; i < px; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < cv.count; ++k)
      if (cv.valid_at(k, i) && cv.at(k, i) < best) {
        best = cv.at(k, i);
        out[i] = k;
      }
  }
  return out;
}

// Block-replicated upsampling, the inverse grid of downsample_box.
inline DepthMap upsample_depth_nearest(const DepthMap& d, int factor) {
  DepthMap out(d.width * factor, d.height * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const std::size_t o = static_cast<std::size_t>(y) * out.width + x;
      const std::size_t i = static_cast<std::size_t>(y / factor) * d.width + x / factor;
      out.depth[o] = d.depth[i];
      out.confidence[o] = d.confidence[i];
      out.mask.set(o, d.mask[i]);
    }
  return out;
}

// Block mean; a block is valid only if all its pixels are.
inline DepthMap downsample_depth_box(const DepthMap& d, int factor) {
  require(factor >= 1 && d.width % factor == 0 && d.height % factor == 0,
          "downsample_depth_box: factor must divide the map size");
  DepthMap out(d.width / factor, d.height / factor);
  const double inv = 1.0 / (factor * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      double s = 0.0, c = 0.0;
      bool ok = true;
      for (int j = 0; j < factor; ++j)
        for (int i = 0; i < factor; ++i) {
          const std::size_t k = static_cast<std::size_t>(y * factor + j) * d.width + x * factor + i;
          ok = ok && d.mask[k];
          s += d.depth[k];
          c += d.confidence[k];
        }
      const std::size_t o = static_cast<std::size_t>(y) * out.width + x;
      out.depth[o] = s * inv;
      out.confidence[o] = c * inv;
      out.mask.set(o, ok);
    }
  return out;
}

}  // namespace pmvs
