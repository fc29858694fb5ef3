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

#include <array>
#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "patchmvs/features.hpp"
#include "patchmvs/geometry.hpp"
#include "patchmvs/image.hpp"
#include "patchmvs/plane_sweep.hpp"

namespace pmvs {

struct View {
  Image image;
  CameraView camera;
};

enum class Term : int { kPatch = 0, kSsim, kGeometric, kSmooth, kFeature };
inline constexpr std::size_t kTermCount = 5;
inline constexpr std::array<const char*, kTermCount> kTermNames = {
    "patch", "ssim", "geometric", "smooth", "feature"};

struct LossWeights {
  double patch = 0.8;
  double ssim = 0.16;
  double geometric = 1.0;
  double smooth = 0.01;
  double feature = 1.0;
  std::vector<double> stage_weights{0.5, 1.0, 2.0};
  int patch_size = 3;
  int ssim_window = kSsimWindow;
  // Depth differences in the smoothness term are divided by this; 0 selects
  // the reference camera's depth-range width.
  double smooth_depth_unit = 0.0;

  std::array<double, kTermCount> lambdas() const {
    return {patch, ssim, geometric, smooth, feature};
  }
  double lambda(Term t) const { return lambdas()[static_cast<int>(t)]; }

  void validate() const {
    for (double l : lambdas()) require(l >= 0.0, "loss weights must be nonnegative");
    require(!stage_weights.empty(), "need at least one stage weight");
    for (double m : stage_weights) require(m >= 0.0, "stage weights must be nonnegative");
    require(patch_size >= 1 && patch_size % 2 == 1, "patch size must be odd");
    require(ssim_window >= 1 && ssim_window % 2 == 1, "SSIM window must be odd");
    require(smooth_depth_unit >= 0.0, "smoothness depth unit must be nonnegative");
  }

  // Only the named term switched on, at unit weight.
  LossWeights only(Term t) const {
    LossWeights w = *this;
    w.patch = w.ssim = w.geometric = w.smooth = w.feature = 0.0;
    switch (t) {
      case Term::kPatch: w.patch = 1.0; break;
      case Term::kSsim: w.ssim = 1.0; break;
      case Term::kGeometric: w.geometric = 1.0; break;
      case Term::kSmooth: w.smooth = 1.0; break;
      case Term::kFeature: w.feature = 1.0; break;
    }
    return w;
  }
};

// scalar == sum(map over mask) / max(1, valid_count).
struct LossReport {
  double scalar = 0.0;
  Image map;
  ValidMask mask;
  std::size_t valid_count = 0;
};

inline LossReport finish_report(Image map, ValidMask mask) {
  LossReport r;
  double sum = 0.0;
  const auto plane = map.channel(0);
  for (std::size_t i = 0; i < plane.size(); ++i)
    if (mask[i]) sum += plane[i];
  r.valid_count = mask.count();
  r.scalar = sum / static_cast<double>(std::max<std::size_t>(1, r.valid_count));
  r.map = std::move(map);
  r.mask = std::move(mask);
  return r;
}

// Per pixel: mean over the sources valid there of the channel-mean absolute
// difference. Valid where `base` holds and at least one source is valid.
inline LossReport masked_l1(const Image& ref, std::span<const Image> rendered,
                            std::span<const ValidMask> masks, const ValidMask& base) {
  if (rendered.empty()) throw std::invalid_argument("photometric loss: no rendered sources");
  require(rendered.size() == masks.size(), "photometric loss: one mask per source");
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    if (!rendered[i].same_shape(ref)) throw std::invalid_argument("photometric loss: shape mismatch");
    require(masks[i].width() == ref.width() && masks[i].height() == ref.height(),
            "photometric loss: mask shape mismatch");
  }
  require(base.width() == ref.width() && base.height() == ref.height(),
          "photometric loss: base mask shape mismatch");
  const int w = ref.width(), h = ref.height(), nc = ref.channels();
  Image map(1, w, h);
  ValidMask mask(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (!base[i]) continue;
      double acc = 0.0;
      int n = 0;
      for (std::size_t s = 0; s < rendered.size(); ++s) {
        if (!masks[s][i]) continue;
        double diff = 0.0;
        for (int c = 0; c < nc; ++c) diff += std::abs(ref.at(c, x, y) - rendered[s].at(c, x, y));
        acc += diff / nc;
        ++n;
      }
      if (n == 0) continue;
      map.at(0, x, y) = acc / n;
      mask.set(i, true);
    }
  return finish_report(std::move(map), std::move(mask));
}

inline LossReport pixel_photometric(const Image& ref, std::span<const Image> rendered,
                                    std::span<const ValidMask> masks,
                                    const ValidMask& ref_mask = {}) {
  const ValidMask base = ref_mask.empty() ? ValidMask(ref.width(), ref.height(), true) : ref_mask;
  return masked_l1(ref, rendered, masks, base);
}

inline LossReport patch_photometric(const PatchImage& ref, std::span<const PatchImage> rendered,
                                    std::span<const ValidMask> masks,
                                    const ValidMask& ref_mask = {}) {
  std::vector<Image> views;
  views.reserve(rendered.size());
  for (const auto& r : rendered) {
    if (r.patch_size != ref.patch_size || r.scales != ref.scales ||
        r.base_channels != ref.base_channels)
      throw std::invalid_argument("patch_photometric: patch geometry mismatch");
    views.push_back(r.data);
  }
  const ValidMask base =
      ref_mask.empty() ? ValidMask(ref.width(), ref.height(), true) : ref_mask;
  return masked_l1(ref.data, views, masks, base);
}

// Valid where every pixel of the (border-clamped) window is valid.
inline ValidMask erode_mask(const ValidMask& m, int radius) {
  if (radius == 0) return m;
  ValidMask out(m.width(), m.height());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      bool ok = true;
      for (int dy = -radius; dy <= radius && ok; ++dy)
        for (int dx = -radius; dx <= radius && ok; ++dx)
          ok = m(clamp_index(x + dx, m.width()), clamp_index(y + dy, m.height()));
      out.set(x, y, ok);
    }
  return out;
}

// Dissimilarity (1 - SSIM) / 2 averaged over channels and over the sources
// whose mask covers the whole window.
inline LossReport ssim_loss(const Image& ref, std::span<const Image> rendered,
                            std::span<const ValidMask> masks, const ValidMask& ref_mask = {},
                            int window = kSsimWindow, double c1 = kSsimC1,
                            double c2 = kSsimC2) {
  if (rendered.empty()) throw std::invalid_argument("ssim_loss: no rendered sources");
  require(rendered.size() == masks.size(), "ssim_loss: one mask per source");
  const int w = ref.width(), h = ref.height(), nc = ref.channels();
  const ValidMask base = ref_mask.empty() ? ValidMask(w, h, true) : ref_mask;
  Image acc(1, w, h);
  std::vector<int> n(static_cast<std::size_t>(w) * h, 0);
  for (std::size_t s = 0; s < rendered.size(); ++s) {
    const Image sm = ssim_map(ref, rendered[s], window, c1, c2);
    const ValidMask valid = erode_mask(masks[s], window / 2);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (!valid[i]) continue;
        double d = 0.0;
        for (int c = 0; c < nc; ++c) d += 0.5 * (1.0 - sm.at(c, x, y));
        acc.at(0, x, y) += d / nc;
        ++n[i];
      }
  }
  ValidMask mask(w, h);
  for (std::size_t i = 0; i < n.size(); ++i) {
    if (!base[i] || n[i] == 0) {
      acc.channel(0)[i] = 0.0;
      continue;
    }
    acc.channel(0)[i] /= n[i];
    mask.set(i, true);
  }
  return finish_report(std::move(acc), std::move(mask));
}

// Source image resampled onto the reference grid at the reference depth,
// one m x m patch per pixel with every member sharing the center depth.
// `tangent` (optional) holds d(value)/d(center depth).
struct RenderedPatches {
  PatchImage patches;
  Image tangent;
  ValidMask mask;
};

inline RenderedPatches render_patches(const Image& src, const PairWarper& warper,
                                      const DepthMap& depth, int m, bool with_tangent,
                                      int margin = 0) {
  const auto offsets = patch_offsets(m);
  const int w = depth.width, h = depth.height, nc = src.channels();
  const int mm = m * m;
  RenderedPatches out;
  out.patches.base_channels = nc;
  out.patches.patch_size = m;
  out.patches.data = Image(nc * mm, w, h);
  if (with_tangent) out.tangent = Image(nc * mm, w, h);
  out.mask = ValidMask(w, h);
  std::vector<BilinearCell> cells(offsets.size());
  std::vector<Vec2> dcoords(offsets.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!depth.valid(x, y)) continue;
      const double d = depth.at(x, y);
      bool ok = true;
      for (std::size_t j = 0; j < offsets.size() && ok; ++j) {
        const PixelWarp pw = warper.warp(Vec2(x, y) + offsets[j], d, dcoords[j]);
        if (!pw.valid) { ok = false; break; }
        if (margin > 0 && (pw.coords.x() < margin || pw.coords.y() < margin ||
                           pw.coords.x() > src.width() - 1 - margin ||
                           pw.coords.y() > src.height() - 1 - margin)) {
          ok = false;
          break;
        }
        const auto cell = bilinear_cell(pw.coords.x(), pw.coords.y(), src.width(), src.height());
        if (!cell) { ok = false; break; }
        cells[j] = *cell;
      }
      if (!ok) continue;
      for (int c = 0; c < nc; ++c)
        for (int j = 0; j < mm; ++j) {
          out.patches.data.at(c * mm + j, x, y) = bilinear_value(src, c, cells[j]);
          if (with_tangent)
            out.tangent.at(c * mm + j, x, y) = bilinear_gradient(src, c, cells[j]).dot(dcoords[j]);
        }
      out.mask.set(x, y, true);
    }
  return out;
}

// Forward/backward cross rendering of the reference image through the best
// source: `to_source` is the reference image rendered onto the source grid
// with the source depth, `back` re-samples it onto the reference grid with
// the reference depth.
struct CrossRendering {
  RenderedPatches to_source;
  CoordField back_coords;
  SampledImage back;
};

inline CrossRendering cross_render(const Image& ref_img, const CameraView& ref_cam,
                                   const DepthMap& ref_depth, const CameraView& src_cam,
                                   const DepthMap& src_depth, bool with_tangent = false) {
  if (src_depth.empty()) throw std::invalid_argument("geometric consistency: missing source depth");
  require(src_depth.width == src_cam.width() && src_depth.height == src_cam.height(),
          "geometric consistency: source depth does not match its view");
  require(ref_depth.width == ref_img.width() && ref_depth.height == ref_img.height(),
          "geometric consistency: reference depth does not match the image");
  CrossRendering out;
  out.to_source = render_patches(ref_img, PairWarper(src_cam, ref_cam), src_depth, 1, with_tangent);
  const PairWarper fwd(ref_cam, src_cam);
  out.back_coords = CoordField(ref_depth.width, ref_depth.height);
  for (int y = 0; y < ref_depth.height; ++y)
    for (int x = 0; x < ref_depth.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * ref_depth.width + x;
      if (!ref_depth.mask[i]) { out.back_coords.valid[i] = 0; continue; }
      const PixelWarp pw = fwd.warp(Vec2(x, y), ref_depth.depth[i]);
      out.back_coords.valid[i] = pw.valid ? 1 : 0;
      out.back_coords.coords[i] = pw.coords;
    }
  out.back = bilinear_sample(out.to_source.patches.data, out.back_coords, &out.to_source.mask);
  return out;
}

inline LossReport geometric_consistency(const Image& ref_img, const CameraView& ref_cam,
                                        const DepthMap& ref_depth, const CameraView& src_cam,
                                        const DepthMap& src_depth) {
  const CrossRendering cr = cross_render(ref_img, ref_cam, ref_depth, src_cam, src_depth);
  const Image rendered[] = {cr.back.values};
  const ValidMask masks[] = {cr.back.mask};
  return masked_l1(ref_img, rendered, masks, ref_depth.mask);
}

// Edge-aware weights exp(-|dI|) per axis and exp(-|lap I|), channel-averaged.
struct SmoothnessWeights {
  Image wx, wy, wl;
};

inline SmoothnessWeights smoothness_weights(const Image& ref) {
  const Gradients g = spatial_gradients(ref);
  const int w = ref.width(), h = ref.height(), nc = ref.channels();
  SmoothnessWeights out{Image(1, w, h), Image(1, w, h), Image(1, w, h)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double ax = 0, ay = 0, al = 0;
      for (int c = 0; c < nc; ++c) {
        ax += std::abs(g.dx.at(c, x, y));
        ay += std::abs(g.dy.at(c, x, y));
        al += std::abs(g.laplacian.at(c, x, y));
      }
      out.wx.at(0, x, y) = std::exp(-ax / nc);
      out.wy.at(0, x, y) = std::exp(-ay / nc);
      out.wl.at(0, x, y) = std::exp(-al / nc);
    }
  return out;
}

// Valid where the pixel and its four stencil neighbours carry depth.
inline ValidMask smoothness_mask(const DepthMap& depth) {
  const int w = depth.width, h = depth.height;
  ValidMask m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      m.set(x, y, depth.valid(x, y) && depth.valid(clamp_index(x - 1, w), y) &&
                      depth.valid(clamp_index(x + 1, w), y) &&
                      depth.valid(x, clamp_index(y - 1, h)) && depth.valid(x, clamp_index(y + 1, h)));
  return m;
}

inline LossReport smoothness(const SmoothnessWeights& sw, const DepthMap& depth,
                             double depth_unit = 1.0) {
  require(depth_unit > 0.0, "smoothness: depth unit must be positive");
  const int w = depth.width, h = depth.height;
  require(sw.wx.width() == w && sw.wx.height() == h, "smoothness: shape mismatch");
  ValidMask mask = smoothness_mask(depth);
  Image map(1, w, h);
  for (int y = 0; y < h; ++y) {
    const int ym = clamp_index(y - 1, h), yp = clamp_index(y + 1, h);
    for (int x = 0; x < w; ++x) {
      if (!mask(x, y)) continue;
      const int xm = clamp_index(x - 1, w), xp = clamp_index(x + 1, w);
      const double d = depth.at(x, y);
      const double gx = 0.5 * (depth.at(xp, y) - depth.at(xm, y));
      const double gy = 0.5 * (depth.at(x, yp) - depth.at(x, ym));
      const double lap = depth.at(xp, y) + depth.at(xm, y) + depth.at(x, yp) + depth.at(x, ym) - 4 * d;
      map.at(0, x, y) = (sw.wx.at(0, x, y) * std::abs(gx) + sw.wy.at(0, x, y) * std::abs(gy) +
                         sw.wl.at(0, x, y) * std::abs(lap)) / depth_unit;
    }
  }
  return finish_report(std::move(map), std::move(mask));
}

inline LossReport smoothness(const Image& ref, const DepthMap& depth, double depth_unit = 1.0) {
  if (ref.width() != depth.width || ref.height() != depth.height)
    throw std::invalid_argument("smoothness: shape mismatch");
  return smoothness(smoothness_weights(ref), depth, depth_unit);
}

// `mask` minus a band of `border` pixels along the image edge.
inline ValidMask feature_base_mask(const ValidMask& mask, int border) {
  ValidMask out = mask;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (x < border || y < border || x >= mask.width() - border || y >= mask.height() - border)
        out.set(x, y, false);
  return out;
}

// Feature maps of the reference and each source, compared after warping the
// source features with the (box-downsampled) depth on the feature grid.
inline LossReport feature_alignment(const Image& ref, const CameraView& ref_view,
                                    std::span<const View> sources, const DepthMap& depth,
                                    const FeatureExtractor& extractor) {
  const int s = extractor.downscale();
  require(ref.width() % s == 0 && ref.height() % s == 0,
          "feature_alignment: downscale must divide the image size");
  const Image f_ref = extractor.extract(ref);
  const CameraView ref_low = ref_view.downscaled(s);
  const DepthMap d_low = downsample_depth_box(depth, s);
  std::vector<Image> rendered;
  std::vector<ValidMask> masks;
  for (const View& v : sources) {
    const Image f = extractor.extract(v.image);
    auto r = render_patches(f, PairWarper(ref_low, v.camera.downscaled(s)), d_low, 1, false,
                            extractor.border());
    rendered.push_back(std::move(r.patches.data));
    masks.push_back(std::move(r.mask));
  }
  return masked_l1(f_ref, rendered, masks, feature_base_mask(d_low.mask, extractor.border()));
}

// Weighted term sum. `attribution` spreads the total over reference pixels:
// attribution(p) = sum_t lambda_t * map_t(p) / count_t, so its sum equals
// `total` up to round-off (feature-grid pixels are split evenly over their
// blocks).
struct TotalLoss {
  double total = 0.0;
  std::array<LossReport, kTermCount> terms;
  std::array<bool, kTermCount> active{};
  Image attribution;

  double scalar(Term t) const { return terms[static_cast<int>(t)].scalar; }
};

inline double combine_terms(const std::array<double, kTermCount>& values, const LossWeights& w) {
  const auto l = w.lambdas();
  double s = 0.0;
  for (std::size_t t = 0; t < kTermCount; ++t) s += l[t] * values[t];
  return s;
}

inline double combine_stages(std::span<const double> stage_losses, std::span<const double> mu) {
  if (stage_losses.size() != mu.size())
    throw std::invalid_argument("multi-scale loss: stage count mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < mu.size(); ++k) s += mu[k] * stage_losses[k];
  return s;
}

// Reference-side inputs for one stage: the reference view, its photometric
// sources, and the best source (index into `sources`) whose depth drives the
// geometric term.
struct SideInputs {
  const View* ref = nullptr;
  std::vector<const View*> sources;
  std::size_t partner = 0;
  const DepthMap* depth = nullptr;
  const DepthMap* partner_depth = nullptr;
};

// Intermediate renderings kept for the analytic gradient.
struct SideState {
  std::vector<RenderedPatches> fine;
  std::vector<RenderedPatches> coarse;
  std::vector<ValidMask> patch_masks;
  std::vector<Image> patch_rendered;
  DepthMap coarse_depth;
  std::vector<ValidMask> ssim_masks;
  CrossRendering cross;
  DepthMap feature_depth;
  std::vector<RenderedPatches> features;
};

// Everything that does not depend on depth, precomputed once per stage.
// With `merge_coarse` the patch term compares fine patches concatenated with
// the bilinearly upsampled patches of the 2x box-downsampled stage.
class SideObjective {
 public:
  SideObjective(const View& ref, std::vector<const View*> sources, std::size_t partner,
                const LossWeights& weights, std::shared_ptr<const FeatureExtractor> extractor,
                bool merge_coarse = false)
      : ref_(&ref), sources_(std::move(sources)), partner_(partner), weights_(weights),
        extractor_(std::move(extractor)), merge_(merge_coarse) {
    weights_.validate();
    if (sources_.empty()) throw std::invalid_argument("objective: no sources");
    require(partner_ < sources_.size(), "objective: partner index out of range");
    const int m = weights_.patch_size;
    const auto fine = extract_patch_image(ref.image, m);
    ref_fine_ = fine.patches;
    ref_fine_mask_ = fine.mask;
    for (const View* v : sources_) warp_fine_.emplace_back(ref.camera, v->camera);
    if (merge_) {
      require(ref.image.width() % 2 == 0 && ref.image.height() % 2 == 0,
              "objective: merging scales needs even image dimensions");
      ref_cam_coarse_ = ref.camera.downscaled(2);
      const Image ref_coarse = downsample_box(ref.image, 2);
      const auto coarse = extract_patch_image(ref_coarse, m);
      const auto merged = merge_patch_scales(ref_fine_, ref_fine_mask_, coarse.patches, coarse.mask);
      ref_patch_ = merged.patches;
      ref_patch_mask_ = merged.mask;
      for (const View* v : sources_) {
        src_coarse_.push_back(downsample_box(v->image, 2));
        warp_coarse_.emplace_back(ref_cam_coarse_, v->camera.downscaled(2));
      }
    } else {
      ref_patch_ = ref_fine_;
      ref_patch_mask_ = ref_fine_mask_;
    }
    smooth_weights_ = smoothness_weights(ref.image);
    if (weights_.feature > 0.0) {
      require(extractor_ != nullptr, "objective: feature term needs an extractor");
      const int s = extractor_->downscale();
      require(ref.image.width() % s == 0 && ref.image.height() % s == 0,
              "objective: extractor downscale must divide the image size");
      ref_features_ = extractor_->extract(ref.image);
      const CameraView ref_low = ref.camera.downscaled(s);
      for (const View* v : sources_) {
        src_features_.push_back(extractor_->extract(v->image));
        warp_feature_.emplace_back(ref_low, v->camera.downscaled(s));
      }
    }
  }

  const View& ref() const { return *ref_; }
  const std::vector<const View*>& sources() const { return sources_; }
  const View& partner() const { return *sources_[partner_]; }
  const LossWeights& weights() const { return weights_; }
  bool merges_coarse() const { return merge_; }
  const PatchImage& ref_patches() const { return ref_patch_; }
  const PatchImage& ref_fine_patches() const { return ref_fine_; }
  const ValidMask& ref_fine_mask() const { return ref_fine_mask_; }
  const ValidMask& ref_patch_mask() const { return ref_patch_mask_; }
  const std::vector<PairWarper>& fine_warpers() const { return warp_fine_; }
  const std::vector<PairWarper>& coarse_warpers() const { return warp_coarse_; }
  const std::vector<PairWarper>& feature_warpers() const { return warp_feature_; }
  const std::vector<Image>& coarse_sources() const { return src_coarse_; }
  const Image& ref_features() const { return ref_features_; }
  const std::vector<Image>& source_features() const { return src_features_; }
  const SmoothnessWeights& smooth_weights() const { return smooth_weights_; }
  int feature_downscale() const { return extractor_ ? extractor_->downscale() : 1; }
  double smooth_unit() const {
    return weights_.smooth_depth_unit > 0.0 ? weights_.smooth_depth_unit
                                             : ref_->camera.d_max() - ref_->camera.d_min();
  }

  TotalLoss evaluate(const DepthMap& depth, const DepthMap& partner_depth,
                     SideState* state = nullptr, bool with_tangent = false) const {
    require(depth.width == ref_->image.width() && depth.height == ref_->image.height(),
            "objective: depth does not match the reference image");
    SideState local;
    SideState& st = state ? *state : local;
    const int w = depth.width, h = depth.height;
    const int m = weights_.patch_size;
    TotalLoss out;
    out.attribution = Image(1, w, h);
    const auto lambdas = weights_.lambdas();
    for (std::size_t t = 0; t < kTermCount; ++t) out.active[t] = lambdas[t] > 0.0;

    const bool need_patch = out.active[0] || out.active[1];
    if (need_patch) {
      st.fine.clear();
      for (std::size_t s = 0; s < sources_.size(); ++s)
        st.fine.push_back(render_patches(sources_[s]->image, warp_fine_[s], depth, m, with_tangent));
    }
    if (out.active[0]) {
      ValidMask base = ref_patch_mask_;
      base &= depth.mask;
      st.patch_masks.clear();
      st.patch_rendered.clear();
      st.coarse.clear();
      if (merge_) {
        st.coarse_depth = downsample_depth_box(depth, 2);
        for (std::size_t s = 0; s < sources_.size(); ++s) {
          st.coarse.push_back(render_patches(src_coarse_[s], warp_coarse_[s], st.coarse_depth, m,
                                             with_tangent));
          const auto merged = merge_patch_scales(st.fine[s].patches, st.fine[s].mask,
                                                 st.coarse[s].patches, st.coarse[s].mask);
          ValidMask mk = st.fine[s].mask;
          mk &= resize_mask_strict(st.coarse[s].mask, w, h);
          st.patch_rendered.push_back(merged.patches.data);
          st.patch_masks.push_back(std::move(mk));
        }
      } else {
        for (const auto& r : st.fine) {
          st.patch_rendered.push_back(r.patches.data);
          st.patch_masks.push_back(r.mask);
        }
      }
      out.terms[0] = masked_l1(ref_patch_.data, st.patch_rendered, st.patch_masks, base);
    }
    if (out.active[1]) {
      ValidMask base = ref_fine_mask_;
      base &= depth.mask;
      base = erode_mask(base, weights_.ssim_window / 2);
      std::vector<Image> rendered;
      st.ssim_masks.clear();
      for (const auto& r : st.fine) {
        rendered.push_back(r.patches.data);
        st.ssim_masks.push_back(r.mask);
      }
      out.terms[1] = ssim_loss(ref_fine_.data, rendered, st.ssim_masks, base, weights_.ssim_window);
    }
    if (out.active[2]) {
      st.cross = cross_render(ref_->image, ref_->camera, depth, partner().camera, partner_depth,
                              with_tangent);
      const Image rendered[] = {st.cross.back.values};
      const ValidMask masks[] = {st.cross.back.mask};
      out.terms[2] = masked_l1(ref_->image, rendered, masks, depth.mask);
    }
    if (out.active[3]) out.terms[3] = smoothness(smooth_weights_, depth, smooth_unit());
    if (out.active[4]) {
      const int s = extractor_->downscale();
      st.feature_depth = downsample_depth_box(depth, s);
      st.features.clear();
      std::vector<Image> rendered;
      std::vector<ValidMask> masks;
      for (std::size_t k = 0; k < sources_.size(); ++k) {
        st.features.push_back(
            render_patches(src_features_[k], warp_feature_[k], st.feature_depth, 1, with_tangent,
                           extractor_->border()));
        rendered.push_back(st.features.back().patches.data);
        masks.push_back(st.features.back().mask);
      }
      out.terms[4] = masked_l1(ref_features_, rendered, masks,
                               feature_base_mask(st.feature_depth.mask, extractor_->border()));
    }

    for (std::size_t t = 0; t < kTermCount; ++t) {
      if (!out.active[t]) continue;
      const LossReport& r = out.terms[t];
      out.total += lambdas[t] * r.scalar;
      if (r.valid_count == 0) continue;
      const double scale = lambdas[t] / static_cast<double>(r.valid_count);
      const int f = r.map.width() == w ? 1 : w / r.map.width();
      const double share = scale / (f * f);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int lx = x / f, ly = y / f;
          if (r.mask(lx, ly)) out.attribution.at(0, x, y) += share * r.map.at(0, lx, ly);
        }
    }
    return out;
  }

 private:
  const View* ref_;
  std::vector<const View*> sources_;
  std::size_t partner_;
  LossWeights weights_;
  std::shared_ptr<const FeatureExtractor> extractor_;
  bool merge_;
  PatchImage ref_fine_, ref_patch_;
  ValidMask ref_fine_mask_, ref_patch_mask_;
  CameraView ref_cam_coarse_;
  std::vector<PairWarper> warp_fine_, warp_coarse_, warp_feature_;
  std::vector<Image> src_coarse_;
  Image ref_features_;
  std::vector<Image> src_features_;
  SmoothnessWeights smooth_weights_;
};

inline std::shared_ptr<const FeatureExtractor> default_extractor() {
  return std::make_shared<GradientFeatureExtractor>(2);
}

inline TotalLoss total_single_scale(const SideInputs& in, const LossWeights& w,
                                    std::shared_ptr<const FeatureExtractor> extractor = default_extractor(),
                                    bool merge_coarse = false) {
  require(in.ref && in.depth, "total_single_scale: missing reference or depth");
  if (w.geometric > 0.0 && !in.partner_depth)
    throw std::invalid_argument("total_single_scale: geometric term needs the source depth");
  const SideObjective obj(*in.ref, in.sources, in.partner, w, std::move(extractor), merge_coarse);
  static const DepthMap kNone;
  return obj.evaluate(*in.depth, in.partner_depth ? *in.partner_depth : kNone);
}

struct MultiScaleLoss {
  double total = 0.0;
  std::vector<TotalLoss> stages;
};

// Stages ordered coarse to fine; every stage after the first merges its
// patches with the next-coarser scale.
inline MultiScaleLoss total_multi_scale(std::span<const SideInputs> stages, const LossWeights& w,
                                        std::shared_ptr<const FeatureExtractor> extractor = default_extractor()) {
  if (stages.size() != w.stage_weights.size())
    throw std::invalid_argument("total_multi_scale: stage count mismatch");
  MultiScaleLoss out;
  std::vector<double> per_stage;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    out.stages.push_back(total_single_scale(stages[k], w, extractor, k > 0));
    per_stage.push_back(out.stages.back().total);
  }
  out.total = combine_stages(per_stage, w.stage_weights);
  return out;
}

struct LossCurves {
  std::vector<Image> curves;
  std::vector<ValidMask> masks;
};

// Per-pixel patch photometric loss of `ref` against `sources` with every
// pixel placed at the same hypothesis, for each global hypothesis in turn.
inline LossCurves photometric_curves(const View& ref, std::span<const View* const> sources,
                                     const DepthHypotheses& hyps, int patch_size) {
  require(hyps.is_global(), "photometric_curves: hypotheses must be global");
  LossWeights w = LossWeights{}.only(Term::kPatch);
  w.patch_size = patch_size;
  const SideObjective obj(ref, {sources.begin(), sources.end()}, 0, w, nullptr);
  LossCurves out;
  const int width = ref.image.width(), height = ref.image.height();
  for (int k = 0; k < hyps.count(); ++k) {
    const DepthMap d(width, height, hyps.at(0, k), true);
    TotalLoss t = obj.evaluate(d, d);
    out.curves.push_back(std::move(t.terms[0].map));
    out.masks.push_back(std::move(t.terms[0].mask));
  }
  return out;
}

// Fraction of masked pixels whose loss curve over a hypothesis sweep has an
// unambiguous minimum: no other local minimum comes within
// `relative_margin` * (max - min) of the global minimum. curves[k] is the
// per-pixel loss map at hypothesis k.
inline double unique_minimum_fraction(std::span<const Image> curves,
                                      std::span<const ValidMask> curve_masks,
                                      const ValidMask& region, double relative_margin) {
  require(curves.size() >= 3 && curves.size() == curve_masks.size(),
          "unique_minimum_fraction: need >= 3 masked samples");
  require(relative_margin >= 0.0, "unique_minimum_fraction: margin must be nonnegative");
  std::size_t total = 0, unique = 0;
  const std::size_t px = region.size();
  const std::size_t k_max = curves.size();
  std::vector<double> c(k_max);
  for (std::size_t i = 0; i < px; ++i) {
    if (!region[i]) continue;
    bool ok = true;
    for (const auto& m : curve_masks) ok = ok && m[i];
    if (!ok) continue;
    ++total;
    for (std::size_t k = 0; k < k_max; ++k) c[k] = curves[k].channel(0)[i];
    const auto [lo_it, hi_it] = std::minmax_element(c.begin(), c.end());
    const std::size_t best = static_cast<std::size_t>(lo_it - c.begin());
    const double bar = *lo_it + relative_margin * (*hi_it - *lo_it);
    bool clear = true;
    for (std::size_t k = 0; k < k_max && clear; ++k) {
      if (k == best) continue;
      // Plateaus count once: strict on the left, non-strict on the right.
      const bool local = (k == 0 || c[k] < c[k - 1]) && (k + 1 == k_max || c[k] <= c[k + 1]);
      clear = !(local && c[k] < bar);
    }
    unique += clear ? 1 : 0;
  }
  return total ? static_cast<double>(unique) / static_cast<double>(total) : 0.0;
}

}  // namespace pmvs
