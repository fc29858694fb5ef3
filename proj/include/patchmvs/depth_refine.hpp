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
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "patchmvs/losses.hpp"

namespace pmvs {

namespace detail {

// Adds d(loss)/d(depth) of an L1 term over rendered sources to `g`.
// `coef` already folds lambda / count; per pixel the map is
// (1 / n_p) sum_s (1 / C) sum_c |ref - rendered|.
inline void l1_render_adjoint(const Image& ref, std::span<const Image> rendered,
                              std::span<const Image> tangent, std::span<const ValidMask> masks,
                              const ValidMask& out_mask, double coef, int channel_begin,
                              int channel_end, int channel_norm, std::vector<double>& g) {
  const int w = ref.width(), h = ref.height();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (!out_mask[i]) continue;
      int n = 0;
      for (const auto& m : masks) n += m[i] ? 1 : 0;
      if (n == 0) continue;
      double acc = 0.0;
      for (std::size_t s = 0; s < rendered.size(); ++s) {
        if (!masks[s][i]) continue;
        for (int c = channel_begin; c < channel_end; ++c)
          acc -= sign_of(ref.at(c, x, y) - rendered[s].at(c, x, y)) * tangent[s].at(c, x, y);
      }
      g[i] += coef * acc / (static_cast<double>(n) * channel_norm);
    }
}

// d/d(b_k) of SSIM(a, b) for one window sample, given the window stats.
inline double ssim_db(const WindowStats& st, double a_k, double b_k, int n, double c1,
                      double c2) {
  const double a1 = 2 * st.mu_a * st.mu_b + c1, a2 = 2 * st.cov + c2;
  const double b1 = st.mu_a * st.mu_a + st.mu_b * st.mu_b + c1, b2 = st.var_a + st.var_b + c2;
  const double s = a1 * a2 / (b1 * b2);
  const double da1 = 2 * st.mu_a / n, da2 = 2 * (a_k - st.mu_a) / n;
  const double db1 = 2 * st.mu_b / n, db2 = 2 * (b_k - st.mu_b) / n;
  return (da1 * a2 + a1 * da2) / (b1 * b2) - s * (db1 / b1 + db2 / b2);
}

}  // namespace detail

// Analytic gradient of one side's total loss with respect to its own depth
// (`g_self`) and the partner depth (`g_partner`). Both vectors are resized
// and overwritten. Masks and valid-source counts are held fixed.
inline TotalLoss side_gradient(const SideObjective& obj, const DepthMap& depth,
                               const DepthMap& partner_depth, std::vector<double>& g_self,
                               std::vector<double>& g_partner) {
  SideState st;
  const TotalLoss loss = obj.evaluate(depth, partner_depth, &st, true);
  const int w = depth.width, h = depth.height;
  const std::size_t px = static_cast<std::size_t>(w) * h;
  g_self.assign(px, 0.0);
  g_partner.assign(partner_depth.empty() ? 0 : partner_depth.depth.size(), 0.0);
  const LossWeights& wts = obj.weights();
  const auto lambdas = wts.lambdas();
  const auto coef_of = [&](Term t) {
    const auto& r = loss.terms[static_cast<int>(t)];
    return lambdas[static_cast<int>(t)] / static_cast<double>(std::max<std::size_t>(1, r.valid_count));
  };

  if (loss.active[0] && loss.terms[0].valid_count > 0) {
    const double coef = coef_of(Term::kPatch);
    const PatchImage& ref = obj.ref_patches();
    const int fine_ch = st.fine.front().patches.channels();
    const int total_ch = ref.channels();
    std::vector<Image> fine_tan;
    for (const auto& r : st.fine) fine_tan.push_back(r.tangent);
    // The fine block occupies the leading fine_ch channels of the rendering.
    detail::l1_render_adjoint(ref.data, st.patch_rendered, fine_tan,
                              st.patch_masks, loss.terms[0].mask, coef, 0, fine_ch, total_ch,
                              g_self);
    if (obj.merges_coarse()) {
      const int cw = st.coarse_depth.width, chh = st.coarse_depth.height;
      std::vector<double> g_coarse(static_cast<std::size_t>(cw) * chh, 0.0);
      const auto& out_mask = loss.terms[0].mask;
      for (std::size_t s = 0; s < st.coarse.size(); ++s) {
        Image up_grad(fine_ch, w, h);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (!out_mask[i] || !st.patch_masks[s][i]) continue;
            int n = 0;
            for (const auto& m : st.patch_masks) n += m[i] ? 1 : 0;
            const double k = coef / (static_cast<double>(n) * total_ch);
            for (int c = 0; c < fine_ch; ++c)
              up_grad.at(c, x, y) =
                  -k * sign_of(ref.data.at(fine_ch + c, x, y) - st.patch_rendered[s].at(fine_ch + c, x, y));
          }
        const Image down = resize_bilinear_adjoint(up_grad, cw, chh);
        const auto& tan = st.coarse[s].tangent;
        for (int y = 0; y < chh; ++y)
          for (int x = 0; x < cw; ++x) {
            if (!st.coarse[s].mask(x, y)) continue;
            double acc = 0.0;
            for (int c = 0; c < fine_ch; ++c) acc += down.at(c, x, y) * tan.at(c, x, y);
            g_coarse[static_cast<std::size_t>(y) * cw + x] += acc;
          }
      }
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          g_self[static_cast<std::size_t>(y) * w + x] +=
              0.25 * g_coarse[static_cast<std::size_t>(y / 2) * cw + x / 2];
    }
  }

  if (loss.active[1] && loss.terms[1].valid_count > 0) {
    const double coef = coef_of(Term::kSsim);
    const Image& a = obj.ref_fine_patches().data;
    const int nc = a.channels();
    const int r = wts.ssim_window / 2;
    const int n = wts.ssim_window * wts.ssim_window;
    const auto& out_mask = loss.terms[1].mask;
    std::vector<ValidMask> eroded;
    for (const auto& m : st.ssim_masks) eroded.push_back(erode_mask(m, r));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (!out_mask[i]) continue;
        int np = 0;
        for (const auto& m : eroded) np += m[i] ? 1 : 0;
        if (np == 0) continue;
        const double k = -0.5 * coef / (static_cast<double>(np) * nc);
        for (std::size_t s = 0; s < st.fine.size(); ++s) {
          if (!eroded[s][i]) continue;
          const Image& b = st.fine[s].patches.data;
          const Image& tb = st.fine[s].tangent;
          for (int c = 0; c < nc; ++c) {
            const auto ws = detail::window_stats(a, b, c, x, y, r);
            for (int dy = -r; dy <= r; ++dy) {
              const int yy = clamp_index(y + dy, h);
              for (int dx = -r; dx <= r; ++dx) {
                const int xx = clamp_index(x + dx, w);
                const double ds = detail::ssim_db(ws, a.at(c, xx, yy), b.at(c, xx, yy), n,
                                                  kSsimC1, kSsimC2);
                g_self[static_cast<std::size_t>(yy) * w + xx] += k * ds * tb.at(c, xx, yy);
              }
            }
          }
        }
      }
  }

  if (loss.active[2] && loss.terms[2].valid_count > 0) {
    const double coef = coef_of(Term::kGeometric);
    const Image& img = obj.ref().image;
    const int nc = img.channels();
    const auto& cr = st.cross;
    const Image& j = cr.to_source.patches.data;
    const Image& tj = cr.to_source.tangent;
    const int pw = j.width(), ph = j.height();
    const PairWarper fwd(obj.ref().camera, obj.partner().camera);
    const auto& out_mask = loss.terms[2].mask;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (!out_mask[i]) continue;
        Vec2 du;
        fwd.warp(Vec2(x, y), depth.depth[i], du);
        const auto cell = bilinear_cell(cr.back_coords.coords[i].x(), cr.back_coords.coords[i].y(), pw, ph);
        const double k = coef / nc;
        const int xs[4] = {cell->x0, cell->x1, cell->x0, cell->x1};
        const int ys[4] = {cell->y0, cell->y0, cell->y1, cell->y1};
        const double wk[4] = {(1 - cell->fx) * (1 - cell->fy), cell->fx * (1 - cell->fy),
                              (1 - cell->fx) * cell->fy, cell->fx * cell->fy};
        for (int c = 0; c < nc; ++c) {
          const double e = -k * sign_of(img.at(c, x, y) - cr.back.values.at(c, x, y));
          if (e == 0.0) continue;
          g_self[i] += e * bilinear_gradient(j, c, *cell).dot(du);
          for (int t = 0; t < 4; ++t) {
            if (wk[t] == 0.0) continue;
            g_partner[static_cast<std::size_t>(ys[t]) * pw + xs[t]] += e * wk[t] * tj.at(c, xs[t], ys[t]);
          }
        }
      }
  }

  if (loss.active[3] && loss.terms[3].valid_count > 0) {
    const double coef = coef_of(Term::kSmooth) / obj.smooth_unit();
    const auto& sw = obj.smooth_weights();
    const auto& out_mask = loss.terms[3].mask;
    const auto at = [&](int x, int y) { return static_cast<std::size_t>(y) * w + x; };
    for (int y = 0; y < h; ++y) {
      const int ym = clamp_index(y - 1, h), yp = clamp_index(y + 1, h);
      for (int x = 0; x < w; ++x) {
        if (!out_mask(x, y)) continue;
        const int xm = clamp_index(x - 1, w), xp = clamp_index(x + 1, w);
        const double d = depth.at(x, y);
        const double gx = 0.5 * (depth.at(xp, y) - depth.at(xm, y));
        const double gy = 0.5 * (depth.at(x, yp) - depth.at(x, ym));
        const double lap = depth.at(xp, y) + depth.at(xm, y) + depth.at(x, yp) + depth.at(x, ym) - 4 * d;
        const double ax = coef * sw.wx.at(0, x, y) * sign_of(gx) * 0.5;
        const double ay = coef * sw.wy.at(0, x, y) * sign_of(gy) * 0.5;
        const double al = coef * sw.wl.at(0, x, y) * sign_of(lap);
        g_self[at(xp, y)] += ax + al;
        g_self[at(xm, y)] += -ax + al;
        g_self[at(x, yp)] += ay + al;
        g_self[at(x, ym)] += -ay + al;
        g_self[at(x, y)] += -4 * al;
      }
    }
  }

  if (loss.active[4] && loss.terms[4].valid_count > 0) {
    const double coef = coef_of(Term::kFeature);
    const Image& f = obj.ref_features();
    const int lw = f.width(), lh = f.height();
    std::vector<Image> vals, tans;
    std::vector<ValidMask> masks;
    for (const auto& r : st.features) {
      vals.push_back(r.patches.data);
      tans.push_back(r.tangent);
      masks.push_back(r.mask);
    }
    std::vector<double> g_low(static_cast<std::size_t>(lw) * lh, 0.0);
    detail::l1_render_adjoint(f, vals, tans, masks, loss.terms[4].mask, coef, 0, f.channels(),
                              f.channels(), g_low);
    const int s = obj.feature_downscale();
    const double share = 1.0 / (s * s);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        g_self[static_cast<std::size_t>(y) * w + x] +=
            share * g_low[static_cast<std::size_t>(y / s) * lw + x / s];
  }

  for (std::size_t i = 0; i < px; ++i)
    if (!depth.mask[i]) g_self[i] = 0.0;
  for (std::size_t i = 0; i < g_partner.size(); ++i)
    if (!partner_depth.mask[i]) g_partner[i] = 0.0;
  return loss;
}

// The reference view and its best source refined together: the objective is
// the reference-side loss (geometric term through the best source) plus the
// best-source-side loss (geometric term through the reference).
class PairObjective {
 public:
  PairObjective(SideObjective ref_side, SideObjective partner_side)
      : ref_(std::move(ref_side)), partner_(std::move(partner_side)) {}

  const SideObjective& ref_side() const { return ref_; }
  const SideObjective& partner_side() const { return partner_; }

  struct Evaluation {
    double total = 0.0;
    TotalLoss ref;
    TotalLoss partner;
  };

  Evaluation evaluate(const DepthMap& d_ref, const DepthMap& d_partner) const {
    Evaluation e;
    e.ref = ref_.evaluate(d_ref, d_partner);
    e.partner = partner_.evaluate(d_partner, d_ref);
    e.total = e.ref.total + e.partner.total;
    return e;
  }

  double loss(const DepthMap& d_ref, const DepthMap& d_partner) const {
    return evaluate(d_ref, d_partner).total;
  }

 private:
  SideObjective ref_;
  SideObjective partner_;
};

// views[ref], its photometric sources (by index into views) and the best
// source `best`, which must be one of them.
inline PairObjective make_pair_objective(std::span<const View> views, int ref,
                                         std::span<const int> sources, int best,
                                         const LossWeights& w,
                                         std::shared_ptr<const FeatureExtractor> extractor,
                                         bool merge_coarse) {
  std::vector<const View*> ref_sources;
  std::size_t partner_index = sources.size();
  for (std::size_t k = 0; k < sources.size(); ++k) {
    if (sources[k] == best) partner_index = k;
    ref_sources.push_back(&views[sources[k]]);
  }
  require(partner_index < sources.size(), "pair objective: best source not among sources");
  std::vector<const View*> best_sources{&views[ref]};
  for (int s : sources)
    if (s != best) best_sources.push_back(&views[s]);
  return PairObjective(
      SideObjective(views[ref], ref_sources, partner_index, w, extractor, merge_coarse),
      SideObjective(views[best], best_sources, 0, w, extractor, merge_coarse));
}

struct PairGradient {
  double total = 0.0;
  std::vector<double> ref;
  std::vector<double> partner;
  PairObjective::Evaluation evaluation;
};

inline PairGradient loss_gradient(const PairObjective& obj, const DepthMap& d_ref,
                                  const DepthMap& d_partner) {
  PairGradient out;
  std::vector<double> a_self, a_partner, b_self, b_partner;
  out.evaluation.ref = side_gradient(obj.ref_side(), d_ref, d_partner, a_self, a_partner);
  out.evaluation.partner = side_gradient(obj.partner_side(), d_partner, d_ref, b_self, b_partner);
  out.evaluation.total = out.evaluation.ref.total + out.evaluation.partner.total;
  out.total = out.evaluation.total;
  out.ref = std::move(a_self);
  for (std::size_t i = 0; i < out.ref.size(); ++i) out.ref[i] += b_partner[i];
  out.partner = std::move(b_self);
  for (std::size_t i = 0; i < out.partner.size(); ++i) out.partner[i] += a_partner[i];
  return out;
}

// Central difference (f(d + h) - f(d - h)) / 2h with h = rel_step * d(p),
// evaluated by full re-evaluation of `f` at each listed pixel. Masked pixels
// get 0.
inline std::vector<double> fd_gradient(const std::function<double(const DepthMap&)>& f,
                                       const DepthMap& depth, double rel_step,
                                       std::span<const std::size_t> pixels) {
  require(rel_step > 0.0, "fd_gradient: step must be positive");
  std::vector<double> g(depth.depth.size(), 0.0);
  DepthMap probe = depth;
  for (std::size_t i : pixels) {
    if (!depth.mask[i]) continue;
    const double d = depth.depth[i], step = rel_step * d;
    probe.depth[i] = d + step;
    const double up = f(probe);
    probe.depth[i] = d - step;
    const double down = f(probe);
    probe.depth[i] = d;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

inline std::vector<double> fd_gradient(const std::function<double(const DepthMap&)>& f,
                                       const DepthMap& depth, double rel_step) {
  std::vector<std::size_t> all(depth.depth.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return fd_gradient(f, depth, rel_step, all);
}

struct PairFdGradient {
  std::vector<double> ref;
  std::vector<double> partner;
};

inline PairFdGradient fd_gradient(const PairObjective& obj, const DepthMap& d_ref,
                                  const DepthMap& d_partner, double rel_step,
                                  std::span<const std::size_t> ref_pixels,
                                  std::span<const std::size_t> partner_pixels) {
  PairFdGradient out;
  out.ref = fd_gradient([&](const DepthMap& d) { return obj.loss(d, d_partner); }, d_ref,
                        rel_step, ref_pixels);
  out.partner = fd_gradient([&](const DepthMap& d) { return obj.loss(d_ref, d); }, d_partner,
                            rel_step, partner_pixels);
  return out;
}

namespace detail {

// True if a bilinear lookup moving from `a` to `b` stays clear of lattice
// lines: no floor change and both ends at least `band` px from an integer.
inline bool clear_of_lattice(const Vec2& a, const Vec2& b, double band) {
  for (int k = 0; k < 2; ++k) {
    if (std::abs(a[k] - b[k]) < 1e-9) continue;  // this axis does not move
    if (std::floor(a[k]) != std::floor(b[k])) return false;
    for (double v : {a[k], b[k]})
      if (std::abs(v - std::round(v)) < band) return false;
  }
  return true;
}

inline bool warp_clear(const PairWarper& w, const Vec2& p, double d0, double d1, double band) {
  const PixelWarp a = w.warp(p, d0), b = w.warp(p, d1);
  if (!a.valid || !b.valid) return true;
  return clear_of_lattice(a.coords, b.coords, band);
}

// Lookups that move when the side's own depth at pixel i moves by +-step.
inline bool side_self_clear(const SideObjective& obj, const DepthMap& depth, std::size_t i,
                            double step, double band) {
  const int w = depth.width;
  const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
  const double d = depth.depth[i];
  const auto offsets = patch_offsets(obj.weights().patch_size);
  for (const auto& wp : obj.fine_warpers())
    for (const Vec2& o : offsets)
      if (!warp_clear(wp, Vec2(x, y) + o, d - step, d + step, band)) return false;
  if (obj.merges_coarse()) {
    const DepthMap dc = downsample_depth_box(depth, 2);
    const double c = dc.at(x / 2, y / 2);
    for (const auto& wp : obj.coarse_warpers())
      for (const Vec2& o : offsets)
        if (!warp_clear(wp, Vec2(x / 2, y / 2) + o, c - step / 4, c + step / 4, band)) return false;
  }
  if (obj.weights().feature > 0.0) {
    const int s = obj.feature_downscale();
    const DepthMap dl = downsample_depth_box(depth, s);
    const double c = dl.at(x / s, y / s);
    const double ds = step / (s * s);
    for (const auto& wp : obj.feature_warpers())
      if (!warp_clear(wp, Vec2(x / s, y / s), c - ds, c + ds, band)) return false;
  }
  if (obj.weights().geometric > 0.0) {
    const PairWarper fwd(obj.ref().camera, obj.partner().camera);
    if (!warp_clear(fwd, Vec2(x, y), d - step, d + step, band)) return false;
  }
  return true;
}

// Lookups that move when the partner depth at partner pixel i moves.
inline bool side_partner_clear(const SideObjective& obj, const DepthMap& partner_depth,
                               std::size_t i, double step, double band) {
  if (obj.weights().geometric <= 0.0) return true;
  const int w = partner_depth.width;
  const int x = static_cast<int>(i % w), y = static_cast<int>(i / w);
  const double d = partner_depth.depth[i];
  const PairWarper back(obj.partner().camera, obj.ref().camera);
  return warp_clear(back, Vec2(x, y), d - step, d + step, band);
}

}  // namespace detail

// Pixels whose +-step perturbation keeps every dependent bilinear lookup off
// cell boundaries (by at least `band` px).
inline bool fd_eligible_ref(const PairObjective& obj, const DepthMap& d_ref,
                            const DepthMap& d_partner, std::size_t i, double rel_step,
                            double band = 1e-3) {
  (void)d_partner;
  if (!d_ref.mask[i]) return false;
  const double step = rel_step * d_ref.depth[i];
  return detail::side_self_clear(obj.ref_side(), d_ref, i, step, band) &&
         detail::side_partner_clear(obj.partner_side(), d_ref, i, step, band);
}

inline bool fd_eligible_partner(const PairObjective& obj, const DepthMap& d_ref,
                                const DepthMap& d_partner, std::size_t i, double rel_step,
                                double band = 1e-3) {
  (void)d_ref;
  if (!d_partner.mask[i]) return false;
  const double step = rel_step * d_partner.depth[i];
  return detail::side_self_clear(obj.partner_side(), d_partner, i, step, band) &&
         detail::side_partner_clear(obj.ref_side(), d_partner, i, step, band);
}

namespace detail {

inline void push_signs(std::vector<std::int8_t>& out, const Image& a, const Image& b,
                       const ValidMask& mask) {
  for (std::size_t i = 0; i < mask.size(); ++i) {
    out.push_back(mask[i] ? 1 : 0);
    if (!mask[i]) continue;
    for (int c = 0; c < a.channels(); ++c) {
      const double r = a.channel(c)[i] - b.channel(c)[i];
      out.push_back(static_cast<std::int8_t>((r > 0.0) - (r < 0.0)));
    }
  }
}

inline void push_mask(std::vector<std::int8_t>& out, const ValidMask& mask) {
  for (std::size_t i = 0; i < mask.size(); ++i) out.push_back(mask[i] ? 1 : 0);
}

// Every sign and mask bit the side loss branches on. Two depths with equal
// signatures lie on the same smooth piece of the loss.
inline std::vector<std::int8_t> side_signature(const SideObjective& obj, const DepthMap& depth,
                                               const SideState& st, const TotalLoss& loss) {
  std::vector<std::int8_t> out;
  if (loss.active[0]) {
    push_mask(out, loss.terms[0].mask);
    for (std::size_t s = 0; s < st.patch_rendered.size(); ++s)
      push_signs(out, obj.ref_patches().data, st.patch_rendered[s], st.patch_masks[s]);
  }
  if (loss.active[1]) {
    push_mask(out, loss.terms[1].mask);
    for (const auto& m : st.ssim_masks) push_mask(out, m);
  }
  if (loss.active[2]) {
    push_mask(out, loss.terms[2].mask);
    push_mask(out, st.cross.to_source.mask);
    push_signs(out, obj.ref().image, st.cross.back.values, st.cross.back.mask);
  }
  if (loss.active[3]) {
    const int w = depth.width, h = depth.height;
    const auto& m = loss.terms[3].mask;
    push_mask(out, m);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!m(x, y)) continue;
        const int xm = clamp_index(x - 1, w), xp = clamp_index(x + 1, w);
        const int ym = clamp_index(y - 1, h), yp = clamp_index(y + 1, h);
        const double d = depth.at(x, y);
        for (double v : {depth.at(xp, y) - depth.at(xm, y), depth.at(x, yp) - depth.at(x, ym),
                         depth.at(xp, y) + depth.at(xm, y) + depth.at(x, yp) + depth.at(x, ym) - 4 * d})
          out.push_back(static_cast<std::int8_t>((v > 0.0) - (v < 0.0)));
      }
  }
  if (loss.active[4]) {
    push_mask(out, loss.terms[4].mask);
    for (const auto& r : st.features) push_signs(out, obj.ref_features(), r.patches.data, r.mask);
  }
  return out;
}

struct SignedLoss {
  double total = 0.0;
  std::vector<std::int8_t> signature;
};

inline SignedLoss signed_loss(const PairObjective& obj, const DepthMap& d_ref,
                              const DepthMap& d_partner) {
  SideState sr, sp;
  const TotalLoss lr = obj.ref_side().evaluate(d_ref, d_partner, &sr);
  const TotalLoss lp = obj.partner_side().evaluate(d_partner, d_ref, &sp);
  SignedLoss out{lr.total + lp.total, side_signature(obj.ref_side(), d_ref, sr, lr)};
  const auto tail = side_signature(obj.partner_side(), d_partner, sp, lp);
  out.signature.insert(out.signature.end(), tail.begin(), tail.end());
  return out;
}

}  // namespace detail

struct GradientCheckReport {
  std::size_t requested = 0;
  std::size_t examined = 0;   // pixels drawn, eligible or not
  std::size_t kinks = 0;      // eligible, but a residual sign or mask bit flips
  std::size_t compared = 0;   // eligible pixels with an FD estimate
  std::size_t passed = 0;
  double tolerance = 1e-3;
  double max_relative_error = 0.0;
  std::vector<double> relative_errors;

  double pass_fraction() const {
    return compared ? static_cast<double>(passed) / static_cast<double>(compared) : 0.0;
  }
};

// Compares loss_gradient with central differences on randomly drawn pixels
// of both depth maps, skipping pixels whose perturbation crosses a bilinear
// cell boundary, until `samples` pixels have been compared.
inline GradientCheckReport gradient_check(const PairObjective& obj, const DepthMap& d_ref,
                                          const DepthMap& d_partner, std::size_t samples,
                                          std::uint64_t seed, double rel_step = 1e-4,
                                          double tolerance = 1e-3) {
  GradientCheckReport rep;
  rep.requested = samples;
  rep.tolerance = tolerance;
  const PairGradient g = loss_gradient(obj, d_ref, d_partner);
  std::vector<std::pair<int, std::size_t>> pool;
  for (std::size_t i = 0; i < d_ref.depth.size(); ++i)
    if (d_ref.mask[i]) pool.emplace_back(0, i);
  for (std::size_t i = 0; i < d_partner.depth.size(); ++i)
    if (d_partner.mask[i]) pool.emplace_back(1, i);
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  for (const auto& [which, i] : pool) {
    if (rep.compared >= samples) break;
    ++rep.examined;
    const bool ok = which == 0 ? fd_eligible_ref(obj, d_ref, d_partner, i, rel_step)
                               : fd_eligible_partner(obj, d_ref, d_partner, i, rel_step);
    if (!ok) continue;
    DepthMap probe = which == 0 ? d_ref : d_partner;
    const double d0 = probe.depth[i], h = rel_step * d0;
    const auto loss_at = [&](double d) {
      probe.depth[i] = d;
      return which == 0 ? detail::signed_loss(obj, probe, d_partner)
                        : detail::signed_loss(obj, d_ref, probe);
    };
    const detail::SignedLoss lm = loss_at(d0 - h), l0 = loss_at(d0), lp = loss_at(d0 + h);
    // An L1 residual, a smoothness difference or a mask bit flipping inside
    // [d - h, d + h] puts a kink under the stencil.
    if (lm.signature != l0.signature || l0.signature != lp.signature) {
      ++rep.kinks;
      continue;
    }
    const double a = which == 0 ? g.ref[i] : g.partner[i];
    const double f = (lp.total - lm.total) / (2.0 * h);
    const double scale = std::max(std::abs(a), std::abs(f));
    const double rel = scale > 0.0 ? std::abs(a - f) / scale : 0.0;
    rep.relative_errors.push_back(rel);
    rep.max_relative_error = std::max(rep.max_relative_error, rel);
    ++rep.compared;
    if (rel <= tolerance) ++rep.passed;
  }
  return rep;
}

struct RefineConfig {
  int iterations = 30;
  double step = 0.0;            // initial per-pixel step in depth units; 0 -> step_scale * interval
  double step_scale = 0.1;
  double gradient_clip = 3.0;   // on the mean-|g|-normalized gradient
  double tolerance = 1e-7;      // relative loss decrease that counts as converged
  int max_halvings = 5;
  double growth = 1.2;

  void validate() const {
    require(iterations >= 0, "refine: iterations must be >= 0");
    require(step >= 0.0 && step_scale > 0.0, "refine: step must be positive");
    require(gradient_clip > 0.0, "refine: gradient clip must be positive");
    require(tolerance >= 0.0 && max_halvings >= 0 && growth >= 1.0, "refine: bad schedule");
  }
};

// Per-pixel admissible interval for refinement.
struct DepthBounds {
  std::vector<double> lo;
  std::vector<double> hi;

  static DepthBounds uniform(std::size_t n, double lo, double hi) {
    return {std::vector<double>(n, lo), std::vector<double>(n, hi)};
  }
  static DepthBounds from_hypotheses(const DepthHypotheses& h, std::size_t n) {
    DepthBounds b;
    b.lo.resize(n);
    b.hi.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      b.lo[i] = h.front(i);
      b.hi[i] = h.back(i);
    }
    return b;
  }
};

struct RefineResult {
  DepthMap ref;
  DepthMap partner;
  std::vector<double> trace;  // loss before the first and after every iteration
  int accepted = 0;
  int rejected = 0;
  bool converged = false;
};

namespace detail {

struct DescentState {
  std::vector<double> step;
  std::vector<int> halvings;
  std::vector<std::uint8_t> frozen;
};

}  // namespace detail

// Backtracking descent on both depth maps at once. Moving pixels whose
// attributed loss rose are rolled back with their step halved; the rest of
// the step is accepted only if the pair loss does not increase, otherwise
// every moving pixel is halved. A pixel halved max_halvings times in a row
// is frozen. A gradient sign flip after an accepted move also halves.
inline RefineResult refine_depth(const PairObjective& obj, const DepthMap& init_ref,
                                 const DepthMap& init_partner, const DepthBounds& ref_bounds,
                                 const DepthBounds& partner_bounds, double interval,
                                 const RefineConfig& cfg) {
  cfg.validate();
  require(interval > 0.0 || cfg.step > 0.0, "refine: need an interval or an explicit step");
  RefineResult res{init_ref, init_partner, {}, 0, 0, false};
  const double s0 = cfg.step > 0.0 ? cfg.step : cfg.step_scale * interval;
  DepthMap* maps[2] = {&res.ref, &res.partner};
  const DepthBounds* bounds[2] = {&ref_bounds, &partner_bounds};
  detail::DescentState ds[2];
  for (int m = 0; m < 2; ++m) {
    const std::size_t n = maps[m]->depth.size();
    require(bounds[m]->lo.size() == n && bounds[m]->hi.size() == n, "refine: bounds size mismatch");
    ds[m].step.assign(n, s0);
    ds[m].halvings.assign(n, 0);
    ds[m].frozen.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i)
      if (maps[m]->mask[i])
        maps[m]->depth[i] = std::clamp(maps[m]->depth[i], bounds[m]->lo[i], bounds[m]->hi[i]);
  }
  if (cfg.iterations == 0) {
    res.ref = init_ref;
    res.partner = init_partner;
    res.trace.push_back(obj.loss(init_ref, init_partner));
    return res;
  }

  const auto halve = [&](int m, std::size_t i) {
    ds[m].step[i] *= 0.5;
    if (++ds[m].halvings[i] >= cfg.max_halvings) ds[m].frozen[i] = 1;
  };

  PairGradient grad = loss_gradient(obj, res.ref, res.partner);
  double current = grad.total;
  res.trace.push_back(current);
  for (int it = 0; it < cfg.iterations; ++it) {
    const std::vector<double>* g[2] = {&grad.ref, &grad.partner};
    double sum = 0.0;
    std::size_t cnt = 0;
    for (int m = 0; m < 2; ++m)
      for (std::size_t i = 0; i < g[m]->size(); ++i)
        if (maps[m]->mask[i] && !ds[m].frozen[i]) {
          sum += std::abs((*g[m])[i]);
          ++cnt;
        }
    if (cnt == 0 || sum == 0.0) {
      res.converged = true;
      break;
    }
    const double norm = sum / cnt;
    DepthMap trial[2] = {res.ref, res.partner};
    std::vector<std::uint8_t> moved[2];
    bool any = false;
    for (int m = 0; m < 2; ++m) {
      moved[m].assign(trial[m].depth.size(), 0);
      for (std::size_t i = 0; i < trial[m].depth.size(); ++i) {
        if (!trial[m].mask[i] || ds[m].frozen[i]) continue;
        const double u = std::clamp((*g[m])[i] / norm, -cfg.gradient_clip, cfg.gradient_clip);
        const double d = std::clamp(trial[m].depth[i] - ds[m].step[i] * u, bounds[m]->lo[i],
                                    bounds[m]->hi[i]);
        if (d != trial[m].depth[i]) {
          trial[m].depth[i] = d;
          moved[m][i] = 1;
          any = true;
        }
      }
    }
    if (!any) {
      res.converged = true;
      break;
    }
    auto eval = obj.evaluate(trial[0], trial[1]);
    bool kept = true;
    if (eval.total > current) {
      // Roll back the pixels whose own loss rose, halving their step, and
      // retry with the rest of the move.
      const Image* before[2] = {&grad.evaluation.ref.attribution,
                                &grad.evaluation.partner.attribution};
      bool any_rose = false;
      for (int m = 0; m < 2; ++m) {
        const auto& after = (m == 0 ? eval.ref : eval.partner).attribution.channel(0);
        const auto& prior = before[m]->channel(0);
        for (std::size_t i = 0; i < moved[m].size(); ++i)
          if (moved[m][i] && after[i] > prior[i]) {
            trial[m].depth[i] = maps[m]->depth[i];
            moved[m][i] = 0;
            halve(m, i);
            any_rose = true;
          }
      }
      kept = false;
      for (int m = 0; m < 2; ++m)
        kept = kept || std::any_of(moved[m].begin(), moved[m].end(), [](std::uint8_t v) { return v; });
      if (any_rose && kept) eval = obj.evaluate(trial[0], trial[1]);
    }

    if (kept && eval.total <= current) {
      const double decrease = current - eval.total;
      res.ref = std::move(trial[0]);
      res.partner = std::move(trial[1]);
      ++res.accepted;
      PairGradient next = loss_gradient(obj, res.ref, res.partner);
      const std::vector<double>* gn[2] = {&next.ref, &next.partner};
      for (int m = 0; m < 2; ++m)
        for (std::size_t i = 0; i < ds[m].step.size(); ++i) {
          if (!moved[m][i]) continue;
          if ((*gn[m])[i] * (*g[m])[i] < 0.0) {
            ds[m].step[i] *= 0.5;  // overshot a minimum along this pixel
          } else {
            ds[m].step[i] = std::min(ds[m].step[i] * cfg.growth, s0);
            ds[m].halvings[i] = 0;
          }
        }
      grad = std::move(next);
      current = grad.total;
      res.trace.push_back(current);
      if (decrease <= cfg.tolerance * std::max(current, 1e-300)) {
        res.converged = true;
        break;
      }
      continue;
    }
    ++res.rejected;
    res.trace.push_back(current);
    bool all_frozen = true;
    for (int m = 0; m < 2; ++m)
      for (std::size_t i = 0; i < moved[m].size(); ++i) {
        if (moved[m][i]) halve(m, i);
        if (maps[m]->mask[i] && !ds[m].frozen[i]) all_frozen = false;
      }
    if (all_frozen) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace pmvs
