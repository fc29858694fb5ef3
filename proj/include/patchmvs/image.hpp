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
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "patchmvs/common.hpp"

namespace pmvs {

// Planar multi-channel raster: sample (c, x, y) lives at
// data[(c * height + y) * width + x].
class Image {
 public:
  Image() = default;
  Image(int channels, int width, int height, double fill = 0.0)
      : channels_(channels), width_(width), height_(height) {
    require(channels >= 1 && width >= 1 && height >= 1,
            "image: dimensions must be positive");
    data_.assign(static_cast<std::size_t>(channels) * width * height, fill);
  }

  int channels() const { return channels_; }
  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t plane_size() const { return static_cast<std::size_t>(width_) * height_; }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Image& o) const {
    return channels_ == o.channels_ && width_ == o.width_ && height_ == o.height_;
  }

  double& at(int c, int x, int y) {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  double at(int c, int x, int y) const {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  std::span<double> channel(int c) {
    return {data_.data() + c * plane_size(), plane_size()};
  }
  std::span<const double> channel(int c) const {
    return {data_.data() + c * plane_size(), plane_size()};
  }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

 private:
  int channels_ = 0;
  int width_ = 0;
  int height_ = 0;
  std::vector<double> data_;
};

class ValidMask {
 public:
  ValidMask() = default;
  ValidMask(int width, int height, bool fill = false)
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(width) * height, fill ? 1 : 0) {}

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool operator()(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  bool operator[](std::size_t i) const { return data_[i] != 0; }
  void set(int x, int y, bool v) { data_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
  void set(std::size_t i, bool v) { data_[i] = v ? 1 : 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 1));
  }
  bool same_shape(const ValidMask& o) const {
    return width_ == o.width_ && height_ == o.height_;
  }

  ValidMask& operator&=(const ValidMask& o) {
    require(same_shape(o), "mask: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] &= o.data_[i];
    return *this;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> data_;
};

// Per-pixel continuous lookup positions for bilinear_sample.
struct CoordField {
  int width = 0;
  int height = 0;
  std::vector<Vec2> coords;
  std::vector<std::uint8_t> valid;  // 0 marks a warp that already failed

  CoordField() = default;
  CoordField(int w, int h)
      : width(w), height(h), coords(static_cast<std::size_t>(w) * h, Vec2::Zero()),
        valid(static_cast<std::size_t>(w) * h, 1) {}
};

// The four lattice neighbours of a continuous position. When the position
// lies exactly on the last row/column the far neighbour collapses onto the
// near one (its weight is zero).
struct BilinearCell {
  int x0, y0, x1, y1;
  double fx, fy;
};

inline std::optional<BilinearCell> bilinear_cell(double x, double y, int width,
                                                 int height) {
  if (!(x >= 0.0 && y >= 0.0 && x <= width - 1 && y <= height - 1)) return std::nullopt;
  BilinearCell c;
  c.x0 = static_cast<int>(std::floor(x));
  c.y0 = static_cast<int>(std::floor(y));
  c.fx = x - c.x0;
  c.fy = y - c.y0;
  c.x1 = c.x0 + 1 < width ? c.x0 + 1 : c.x0;
  c.y1 = c.y0 + 1 < height ? c.y0 + 1 : c.y0;
  return c;
}

inline double bilinear_value(const Image& img, int c, const BilinearCell& k) {
  const double a = img.at(c, k.x0, k.y0), b = img.at(c, k.x1, k.y0);
  const double d = img.at(c, k.x0, k.y1), e = img.at(c, k.x1, k.y1);
  return (1 - k.fy) * ((1 - k.fx) * a + k.fx * b) + k.fy * ((1 - k.fx) * d + k.fx * e);
}

// Spatial derivative of the bilinear interpolant. On lattice lines this is
// the right-sided limit, falling back to the left side on the last column
// or row.
inline Vec2 bilinear_gradient(const Image& img, int c, const BilinearCell& k) {
  int x0 = k.x0, x1 = k.x1, y0 = k.y0, y1 = k.y1;
  double fx = k.fx, fy = k.fy;
  if (x1 == x0 && x0 > 0) { x0 -= 1; fx = 1.0; }
  if (y1 == y0 && y0 > 0) { y0 -= 1; fy = 1.0; }
  const double a = img.at(c, x0, y0), b = img.at(c, x1, y0);
  const double d = img.at(c, x0, y1), e = img.at(c, x1, y1);
  const double gx = (x1 == x0) ? 0.0 : (1 - fy) * (b - a) + fy * (e - d);
  const double gy = (y1 == y0) ? 0.0 : (1 - fx) * (d - a) + fx * (e - b);
  return {gx, gy};
}

// True when every neighbour carrying weight is marked valid.
inline bool cell_valid(const ValidMask& mask, const BilinearCell& k) {
  if (!mask(k.x0, k.y0)) return false;
  if (k.fx > 0.0 && !mask(k.x1, k.y0)) return false;
  if (k.fy > 0.0 && !mask(k.x0, k.y1)) return false;
  if (k.fx > 0.0 && k.fy > 0.0 && !mask(k.x1, k.y1)) return false;
  return true;
}

struct SampledImage {
  Image values;
  ValidMask mask;
};

// Out-of-range positions and failed warps produce 0 with a false mask.
// `source_mask`, when given, also invalidates samples touching a masked-out
// neighbour.
inline SampledImage bilinear_sample(const Image& img, const CoordField& coords,
                                    const ValidMask* source_mask = nullptr) {
  require(coords.coords.size() == static_cast<std::size_t>(coords.width) * coords.height,
          "bilinear_sample: coordinate field size mismatch");
  SampledImage out{Image(img.channels(), coords.width, coords.height),
                   ValidMask(coords.width, coords.height)};
  for (int y = 0; y < coords.height; ++y) {
    for (int x = 0; x < coords.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * coords.width + x;
      if (!coords.valid[i]) continue;
      const auto cell = bilinear_cell(coords.coords[i].x(), coords.coords[i].y(),
                                      img.width(), img.height());
      if (!cell) continue;
      if (source_mask && !cell_valid(*source_mask, *cell)) continue;
      for (int c = 0; c < img.channels(); ++c)
        out.values.at(c, x, y) = bilinear_value(img, c, *cell);
      out.mask.set(i, true);
    }
  }
  return out;
}

// "High-dimension image" of reshaped patches: channel c * m^2 + j at pixel p
// holds base channel c at p + offset_j (offsets row-major). A merged image
// concatenates `scales` such blocks.
struct PatchImage {
  Image data;
  int base_channels = 0;
  int patch_size = 1;
  int scales = 1;

  int width() const { return data.width(); }
  int height() const { return data.height(); }
  int channels() const { return data.channels(); }
};

struct PatchExtraction {
  PatchImage patches;
  ValidMask mask;
};

// Members falling outside the image replicate the border, and the border ring
// of width m/2 is masked out.
inline PatchExtraction extract_patch_image(const Image& img, int m) {
  require(m >= 1 && m % 2 == 1, "extract_patch_image: patch size must be odd");
  require(m <= std::min(img.width(), img.height()),
          "extract_patch_image: patch larger than image");
  const int r = m / 2, w = img.width(), h = img.height();
  PatchExtraction out;
  out.patches.base_channels = img.channels();
  out.patches.patch_size = m;
  out.patches.data = Image(img.channels() * m * m, w, h);
  out.mask = ValidMask(w, h);
  for (int c = 0; c < img.channels(); ++c) {
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int ch = c * m * m + (dy + r) * m + (dx + r);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            out.patches.data.at(ch, x, y) =
                img.at(c, clamp_index(x + dx, w), clamp_index(y + dy, h));
      }
    }
  }
  for (int y = r; y < h - r; ++y)
    for (int x = r; x < w - r; ++x) out.mask.set(x, y, true);
  return out;
}

namespace detail {

// Uniform-window statistics with replicated borders.
struct WindowStats {
  double mu_a, mu_b, var_a, var_b, cov;
};

inline WindowStats window_stats(const Image& a, const Image& b, int c, int x, int y,
                                int radius) {
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  int n = 0;
  for (int dy = -radius; dy <= radius; ++dy) {
    const int yy = clamp_index(y + dy, a.height());
    for (int dx = -radius; dx <= radius; ++dx) {
      const int xx = clamp_index(x + dx, a.width());
      const double va = a.at(c, xx, yy), vb = b.at(c, xx, yy);
      sa += va; sb += vb; saa += va * va; sbb += vb * vb; sab += va * vb;
      ++n;
    }
  }
  const double inv = 1.0 / n;
  WindowStats s;
  s.mu_a = sa * inv;
  s.mu_b = sb * inv;
  s.var_a = saa * inv - s.mu_a * s.mu_a;
  s.var_b = sbb * inv - s.mu_b * s.mu_b;
  s.cov = sab * inv - s.mu_a * s.mu_b;
  return s;
}

inline double ssim_from_stats(const WindowStats& s, double c1, double c2) {
  return ((2 * s.mu_a * s.mu_b + c1) * (2 * s.cov + c2)) /
         ((s.mu_a * s.mu_a + s.mu_b * s.mu_b + c1) * (s.var_a + s.var_b + c2));
}

}  // namespace detail

inline constexpr int kSsimWindow = 3;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

// Per-channel SSIM over a uniform window x window neighbourhood with
// replicated borders.
inline Image ssim_map(const Image& a, const Image& b, int window = kSsimWindow,
                      double c1 = kSsimC1, double c2 = kSsimC2) {
  if (!a.same_shape(b)) throw std::invalid_argument("ssim_map: shape mismatch");
  require(window >= 1 && window % 2 == 1, "ssim_map: window must be odd");
  Image out(a.channels(), a.width(), a.height());
  const int r = window / 2;
  for (int c = 0; c < a.channels(); ++c)
    for (int y = 0; y < a.height(); ++y)
      for (int x = 0; x < a.width(); ++x)
        out.at(c, x, y) = detail::ssim_from_stats(detail::window_stats(a, b, c, x, y, r), c1, c2);
  return out;
}

struct Gradients {
  Image dx;         // central difference along x
  Image dy;         // central difference along y
  Image laplacian;  // 5-point stencil
};

inline Gradients spatial_gradients(const Image& img) {
  const int w = img.width(), h = img.height();
  Gradients g{Image(img.channels(), w, h), Image(img.channels(), w, h),
              Image(img.channels(), w, h)};
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      const int ym = clamp_index(y - 1, h), yp = clamp_index(y + 1, h);
      for (int x = 0; x < w; ++x) {
        const int xm = clamp_index(x - 1, w), xp = clamp_index(x + 1, w);
        const double v = img.at(c, x, y);
        g.dx.at(c, x, y) = 0.5 * (img.at(c, xp, y) - img.at(c, xm, y));
        g.dy.at(c, x, y) = 0.5 * (img.at(c, x, yp) - img.at(c, x, ym));
        g.laplacian.at(c, x, y) = img.at(c, xp, y) + img.at(c, xm, y) +
                                  img.at(c, x, yp) + img.at(c, x, ym) - 4.0 * v;
      }
    }
  }
  return g;
}

// Corner-aligned resampling: output pixel i maps to input position
// i * (W_in - 1) / (W_out - 1), so the first and last pixel centers of both
// grids coincide. A one-pixel output axis maps to input position 0.
struct ResizeTap {
  int i0, i1;
  double f;
};

inline std::vector<ResizeTap> resize_taps(int in, int out) {
  std::vector<ResizeTap> taps(static_cast<std::size_t>(out));
  const double scale = out > 1 ? static_cast<double>(in - 1) / (out - 1) : 0.0;
  for (int i = 0; i < out; ++i) {
    const double pos = i * scale;
    int i0 = static_cast<int>(std::floor(pos));
    if (i0 > in - 1) i0 = in - 1;
    const double f = pos - i0;
    taps[i] = {i0, std::min(i0 + 1, in - 1), f};
  }
  return taps;
}

inline Image resize_bilinear(const Image& img, int new_width, int new_height) {
  require(new_width >= 1 && new_height >= 1, "resize_bilinear: target must be >= 1");
  const auto tx = resize_taps(img.width(), new_width);
  const auto ty = resize_taps(img.height(), new_height);
  Image out(img.channels(), new_width, new_height);
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < new_height; ++y)
      for (int x = 0; x < new_width; ++x) {
        const auto& a = tx[x];
        const auto& b = ty[y];
        const double top = (1 - a.f) * img.at(c, a.i0, b.i0) + a.f * img.at(c, a.i1, b.i0);
        const double bot = (1 - a.f) * img.at(c, a.i0, b.i1) + a.f * img.at(c, a.i1, b.i1);
        out.at(c, x, y) = (1 - b.f) * top + b.f * bot;
      }
  return out;
}

// Transpose of resize_bilinear: scatters `grad` (at the resized shape) back
// onto an in_width x in_height grid.
inline Image resize_bilinear_adjoint(const Image& grad, int in_width, int in_height) {
  const auto tx = resize_taps(in_width, grad.width());
  const auto ty = resize_taps(in_height, grad.height());
  Image out(grad.channels(), in_width, in_height);
  for (int c = 0; c < grad.channels(); ++c)
    for (int y = 0; y < grad.height(); ++y)
      for (int x = 0; x < grad.width(); ++x) {
        const double g = grad.at(c, x, y);
        if (g == 0.0) continue;
        const auto& a = tx[x];
        const auto& b = ty[y];
        out.at(c, a.i0, b.i0) += (1 - a.f) * (1 - b.f) * g;
        out.at(c, a.i1, b.i0) += a.f * (1 - b.f) * g;
        out.at(c, a.i0, b.i1) += (1 - a.f) * b.f * g;
        out.at(c, a.i1, b.i1) += a.f * b.f * g;
      }
  return out;
}

// Nearest-neighbour counterpart of resize_bilinear's corner-aligned grid.
inline ValidMask resize_mask_nearest(const ValidMask& mask, int new_width, int new_height) {
  ValidMask out(new_width, new_height);
  const double sx = new_width > 1 ? static_cast<double>(mask.width() - 1) / (new_width - 1) : 0.0;
  const double sy = new_height > 1 ? static_cast<double>(mask.height() - 1) / (new_height - 1) : 0.0;
  for (int y = 0; y < new_height; ++y)
    for (int x = 0; x < new_width; ++x)
      out.set(x, y, mask(static_cast<int>(std::lround(x * sx)),
                         static_cast<int>(std::lround(y * sy))));
  return out;
}

// Valid where every input pixel carrying bilinear weight is valid.
inline ValidMask resize_mask_strict(const ValidMask& mask, int new_width, int new_height) {
  const auto tx = resize_taps(mask.width(), new_width);
  const auto ty = resize_taps(mask.height(), new_height);
  ValidMask out(new_width, new_height);
  for (int y = 0; y < new_height; ++y)
    for (int x = 0; x < new_width; ++x) {
      const auto& a = tx[x];
      const auto& b = ty[y];
      bool ok = mask(a.i0, b.i0);
      if (a.f > 0) ok = ok && mask(a.i1, b.i0);
      if (b.f > 0) ok = ok && mask(a.i0, b.i1);
      if (a.f > 0 && b.f > 0) ok = ok && mask(a.i1, b.i1);
      out.set(x, y, ok);
    }
  return out;
}

// Mean over factor x factor blocks; pairs with CameraView::downscaled.
inline Image downsample_box(const Image& img, int factor) {
  require(factor >= 1 && img.width() % factor == 0 && img.height() % factor == 0,
          "downsample_box: factor must divide the image size");
  const int w = img.width() / factor, h = img.height() / factor;
  Image out(img.channels(), w, h);
  const double inv = 1.0 / (factor * factor);
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0;
        for (int j = 0; j < factor; ++j)
          for (int i = 0; i < factor; ++i) s += img.at(c, x * factor + i, y * factor + j);
        out.at(c, x, y) = s * inv;
      }
  return out;
}

struct MergedPatches {
  PatchImage patches;
  ValidMask mask;
};

// Neighbour-stage merge: the coarse patch image is upsampled to the fine
// grid and appended after the fine channels. The mask is fine AND the
// nearest-upsampled coarse mask.
inline MergedPatches merge_patch_scales(const PatchImage& fine, const ValidMask& fine_mask,
                                        const PatchImage& coarse,
                                        const ValidMask& coarse_mask) {
  if (fine.patch_size != coarse.patch_size)
    throw std::invalid_argument("merge_patch_scales: patch size mismatch");
  if (fine.base_channels != coarse.base_channels || fine.channels() != coarse.channels())
    throw std::invalid_argument("merge_patch_scales: channel mismatch");
  const Image up = resize_bilinear(coarse.data, fine.width(), fine.height());
  MergedPatches out;
  out.patches.base_channels = fine.base_channels;
  out.patches.patch_size = fine.patch_size;
  out.patches.scales = fine.scales + coarse.scales;
  out.patches.data = Image(fine.channels() + up.channels(), fine.width(), fine.height());
  auto& dst = out.patches.data.data();
  std::copy(fine.data.data().begin(), fine.data.data().end(), dst.begin());
  std::copy(up.data().begin(), up.data().end(),
            dst.begin() + static_cast<std::ptrdiff_t>(fine.data.data().size()));
  out.mask = fine_mask;
  out.mask &= resize_mask_nearest(coarse_mask, fine.width(), fine.height());
  return out;
}

inline Image grayscale(const Image& img) {
  Image out(1, img.width(), img.height());
  const double inv = 1.0 / img.channels();
  for (int c = 0; c < img.channels(); ++c) {
    const auto src = img.channel(c);
    auto dst = out.channel(0);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i] * inv;
  }
  return out;
}

}  // namespace pmvs
