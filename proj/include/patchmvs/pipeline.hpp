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

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patchmvs/depth_refine.hpp"
#include "patchmvs/fusion.hpp"
#include "patchmvs/io.hpp"
#include "patchmvs/losses.hpp"
#include "patchmvs/plane_sweep.hpp"
#include "patchmvs/synthetic.hpp"
#include "patchmvs/view_selection.hpp"

namespace pmvs {

// One coarse-to-fine stage. The first stage sweeps the whole depth range
// with `count` samples; later stages sweep count samples over
// prev +- count * interval.
struct StageSpec {
  int count = 48;
  double interval = 4.24;
};

struct PipelineConfig {
  LossWeights loss;
  std::vector<StageSpec> stages{{48, 4.24}, {32, 2.12}, {8, 1.06}};
  RefineConfig refine;
  FusionConfig fusion{1.0, 0.01, 4};
  int views = 4;               // N1 photometric sources per reference
  double temperature = 1e-7;   // softmax temperature on raw color variance
  double eval_cap = 20.0;
  int workers = 1;

  void validate() const {
    loss.validate();
    refine.validate();
    fusion.validate();
    require(!stages.empty(), "config: need at least one stage");
    for (const auto& s : stages)
      require(s.count >= 2 && s.interval > 0.0, "config: bad stage schedule");
    require(views >= 1, "config: need at least one source view");
    require(temperature > 0.0 && eval_cap > 0.0 && workers >= 1, "config: bad scalar setting");
  }
};

inline nlohmann::json config_to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["loss_weights"] = {{"patch", c.loss.patch},
                       {"ssim", c.loss.ssim},
                       {"geometric", c.loss.geometric},
                       {"smooth", c.loss.smooth},
                       {"feature", c.loss.feature},
                       {"stage_weights", c.loss.stage_weights},
                       {"patch_size", c.loss.patch_size},
                       {"ssim_window", c.loss.ssim_window},
                       {"smooth_depth_unit", c.loss.smooth_depth_unit}};
  j["stages"] = nlohmann::json::array();
  for (const auto& s : c.stages) j["stages"].push_back({{"count", s.count}, {"interval", s.interval}});
  j["refine"] = {{"iterations", c.refine.iterations},
                 {"step", c.refine.step},
                 {"step_scale", c.refine.step_scale},
                 {"gradient_clip", c.refine.gradient_clip},
                 {"tolerance", c.refine.tolerance},
                 {"max_halvings", c.refine.max_halvings},
                 {"growth", c.refine.growth}};
  j["fusion"] = {{"max_reprojection_px", c.fusion.max_reprojection_px},
                 {"max_relative_depth", c.fusion.max_relative_depth}};
  j["views"] = c.views;
  j["consistency"] = c.fusion.min_views;
  j["temperature"] = c.temperature;
  j["eval_cap"] = c.eval_cap;
  j["workers"] = c.workers;
  return j;
}

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> keys,
                       const char* where) {
  if (!j.is_object()) throw std::invalid_argument(std::string("config: ") + where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* name : keys) known = known || k == name;
    if (!known) throw std::invalid_argument("config: unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

// Missing keys keep their defaults; unknown keys are rejected.
inline PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  detail::check_keys(j, {"loss_weights", "stages", "refine", "fusion", "views", "consistency",
                         "temperature", "eval_cap", "workers"},
                     "config");
  if (j.contains("loss_weights")) {
    const auto& l = j.at("loss_weights");
    detail::check_keys(l, {"patch", "ssim", "geometric", "smooth", "feature", "stage_weights",
                           "patch_size", "ssim_window", "smooth_depth_unit"},
                       "loss_weights");
    detail::read_if(l, "patch", c.loss.patch);
    detail::read_if(l, "ssim", c.loss.ssim);
    detail::read_if(l, "geometric", c.loss.geometric);
    detail::read_if(l, "smooth", c.loss.smooth);
    detail::read_if(l, "feature", c.loss.feature);
    detail::read_if(l, "stage_weights", c.loss.stage_weights);
    detail::read_if(l, "patch_size", c.loss.patch_size);
    detail::read_if(l, "ssim_window", c.loss.ssim_window);
    detail::read_if(l, "smooth_depth_unit", c.loss.smooth_depth_unit);
  }
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& s : j.at("stages")) {
      detail::check_keys(s, {"count", "interval"}, "stages");
      StageSpec st;
      detail::read_if(s, "count", st.count);
      detail::read_if(s, "interval", st.interval);
      c.stages.push_back(st);
    }
  }
  if (j.contains("refine")) {
    const auto& r = j.at("refine");
    detail::check_keys(r, {"iterations", "step", "step_scale", "gradient_clip", "tolerance",
                           "max_halvings", "growth"},
                       "refine");
    detail::read_if(r, "iterations", c.refine.iterations);
    detail::read_if(r, "step", c.refine.step);
    detail::read_if(r, "step_scale", c.refine.step_scale);
    detail::read_if(r, "gradient_clip", c.refine.gradient_clip);
    detail::read_if(r, "tolerance", c.refine.tolerance);
    detail::read_if(r, "max_halvings", c.refine.max_halvings);
    detail::read_if(r, "growth", c.refine.growth);
  }
  if (j.contains("fusion")) {
    const auto& f = j.at("fusion");
    detail::check_keys(f, {"max_reprojection_px", "max_relative_depth"}, "fusion");
    detail::read_if(f, "max_reprojection_px", c.fusion.max_reprojection_px);
    detail::read_if(f, "max_relative_depth", c.fusion.max_relative_depth);
  }
  detail::read_if(j, "views", c.views);
  detail::read_if(j, "consistency", c.fusion.min_views);
  detail::read_if(j, "temperature", c.temperature);
  detail::read_if(j, "eval_cap", c.eval_cap);
  detail::read_if(j, "workers", c.workers);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Dataset layout

struct Dataset {
  std::vector<View> views;
  std::vector<ViewRanking> pairs;
  std::optional<SparseTrackSet> tracks;
  std::vector<DepthMap> gt_depths;
  std::optional<PointCloud> gt_cloud;
};

inline std::string view_name(int id, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%08d%s", id, ext);
  return buf;
}

inline std::vector<ViewRanking> rank_all(std::span<const View> views, const SparseTrackSet& tracks) {
  std::vector<CameraView> cams;
  std::vector<int> ids;
  for (std::size_t i = 0; i < views.size(); ++i) {
    cams.push_back(views[i].camera);
    ids.push_back(static_cast<int>(i));
  }
  std::vector<ViewRanking> out;
  for (int i : ids) out.push_back(rank_sources(i, ids, cams, tracks, views.size()));
  return out;
}

inline Dataset dataset_from_bundle(const SceneBundle& b) {
  Dataset d;
  d.views = b.views;
  d.tracks = b.tracks;
  d.pairs = rank_all(d.views, b.tracks);
  d.gt_depths = b.gt_depths;
  d.gt_cloud = b.gt_cloud;
  return d;
}

inline nlohmann::json scene_summary(const SceneSpec& s) {
  return {{"seed", s.seed},
          {"cameras", s.camera_count},
          {"width", s.width},
          {"height", s.height},
          {"focal", s.focal},
          {"d_min", s.d_min},
          {"d_max", s.d_max},
          {"surfaces", s.surfaces.size()},
          {"noise_sigma", s.noise_sigma},
          {"gt_min_views", s.gt_min_views}};
}

inline void write_dataset(const std::filesystem::path& root, const Dataset& d,
                          const std::optional<nlohmann::json>& summary = std::nullopt) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  for (std::size_t i = 0; i < d.views.size(); ++i) {
    const int id = static_cast<int>(i);
    write_file(root / "cams" / view_name(id, "_cam.txt"), write_cam_file(d.views[i].camera));
    write_pfm(root / "images" / view_name(id, ".pfm"), d.views[i].image);
  }
  write_file(root / "pair.txt", write_pair_file(d.pairs));
  if (d.tracks) write_file(root / "sparse" / "tracks.txt", write_tracks(*d.tracks));
  for (std::size_t i = 0; i < d.gt_depths.size(); ++i)
    write_pfm(root / "gt" / "depth" / view_name(static_cast<int>(i), ".pfm"), depth_to_image(d.gt_depths[i]));
  if (d.gt_cloud) write_ply(root / "gt" / "cloud.ply", *d.gt_cloud);
  if (summary) write_file(root / "scene.json", summary->dump(2) + "\n");
}

inline Dataset read_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  Dataset d;
  d.pairs = parse_pair_file(read_file(root / "pair.txt"));
  const int n = static_cast<int>(d.pairs.size());
  for (int id = 0; id < n; ++id) {
    Image img = read_pfm(root / "images" / view_name(id, ".pfm"));
    CameraView cam = parse_cam_file(read_file(root / "cams" / view_name(id, "_cam.txt")), img.width(), img.height());
    d.views.push_back(View{std::move(img), cam});
  }
  for (const auto& vr : d.pairs)
    require(vr.ref >= 0 && vr.ref < n, "dataset: pair file reference out of range");
  if (fs::exists(root / "sparse" / "tracks.txt"))
    d.tracks = parse_tracks(read_file(root / "sparse" / "tracks.txt"));
  for (int id = 0; id < n; ++id) {
    const fs::path p = root / "gt" / "depth" / view_name(id, ".pfm");
    if (!fs::exists(p)) break;
    d.gt_depths.push_back(depth_from_image(read_pfm(p)));
  }
  if (fs::exists(root / "gt" / "cloud.ply")) d.gt_cloud = read_ply(root / "gt" / "cloud.ply");
  return d;
}

// ---------------------------------------------------------------------------
// Depth estimation

struct StageOutput {
  int factor = 1;
  double interval = 0.0;
  std::vector<DepthMap> swept;
  std::vector<DepthMap> refined;
  std::vector<RefineResult> runs;
};

struct DepthEstimate {
  std::vector<DepthMap> depth;  // full resolution, per view
  std::vector<StageOutput> stages;
};

// Sources of `ref` in ranking order, capped at n; the first is the best.
inline std::vector<int> ranked_sources(const std::vector<ViewRanking>& pairs, int ref, int n) {
  for (const auto& vr : pairs)
    if (vr.ref == ref) {
      std::vector<int> out;
      for (const auto& [id, score] : vr.sources) {
        if (id == ref) continue;
        out.push_back(id);
        if (static_cast<int>(out.size()) == n) break;
      }
      if (out.empty()) throw std::invalid_argument("pipeline: view without sources");
      return out;
    }
  throw std::invalid_argument("pipeline: view missing from the pair file");
}

inline DepthEstimate estimate_depths(std::span<const View> full_views,
                                     const std::vector<ViewRanking>& pairs,
                                     const PipelineConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(full_views.size());
  const int k_stages = static_cast<int>(cfg.stages.size());
  std::vector<std::vector<int>> sources(n);
  for (int v = 0; v < n; ++v) sources[v] = ranked_sources(pairs, v, cfg.views);
  const auto extractor = default_extractor();
  DepthEstimate est;
  std::vector<DepthMap> prev;
  std::vector<DepthHypotheses> hyps(n);
  for (int k = 0; k < k_stages; ++k) {
    StageOutput so;
    so.factor = 1 << (k_stages - 1 - k);
    std::vector<View> views;
    for (const View& v : full_views)
      views.push_back(View{downsample_box(v.image, so.factor), v.camera.downscaled(so.factor)});
    so.swept.resize(n);
    for (int v = 0; v < n; ++v) {
      const CameraView& cam = views[v].camera;
      if (k == 0) {
        hyps[v] = make_hypotheses(cam.d_min(), cam.d_max(), cfg.stages[0].count);
      } else {
        hyps[v] = narrow_range(upsample_depth_nearest(prev[v], 2), cfg.stages[k].count,
                               cfg.stages[k].interval, cam.d_min(), cam.d_max());
      }
      std::vector<SourceView> srcs;
      for (int s : sources[v]) srcs.push_back(SourceView{&views[s].image, views[s].camera});
      const CostVolume cv = build_cost_volume(views[v].image, srcs, cam, hyps[v]);
      so.swept[v] = regress_depth(cv, hyps[v], cfg.temperature);
    }
    so.interval = k == 0 ? hyps[0].interval() : cfg.stages[k].interval;
    so.refined.resize(n);
    so.runs.resize(n);
    const bool merge = k > 0;
#pragma omp parallel for schedule(dynamic) num_threads(cfg.workers)
    for (int v = 0; v < n; ++v) {
      const int best = sources[v].front();
      const PairObjective obj =
          make_pair_objective(views, v, sources[v], best, cfg.loss, extractor, merge);
      const std::size_t px_ref = so.swept[v].depth.size(), px_best = so.swept[best].depth.size();
      so.runs[v] = refine_depth(obj, so.swept[v], so.swept[best],
                                DepthBounds::from_hypotheses(hyps[v], px_ref),
                                DepthBounds::from_hypotheses(hyps[best], px_best), so.interval,
                                cfg.refine);
      so.refined[v] = so.runs[v].ref;
      so.refined[v].confidence = so.swept[v].confidence;
    }
    prev = so.refined;
    est.stages.push_back(std::move(so));
  }
  est.depth = prev;
  const int last_factor = est.stages.back().factor;
  if (last_factor > 1)
    for (auto& d : est.depth) d = upsample_depth_nearest(d, last_factor);
  return est;
}

inline PointCloud fuse_dataset(std::span<const View> views, const std::vector<DepthMap>& depths,
                               const FusionConfig& cfg) {
  require(views.size() == depths.size(), "fuse: one depth map per view");
  std::vector<DepthView> dv;
  for (std::size_t i = 0; i < views.size(); ++i)
    dv.push_back(DepthView{static_cast<int>(i), &depths[i], views[i].camera, &views[i].image});
  return fuse_point_cloud(dv, cfg);
}

inline nlohmann::json metrics_json(const CloudMetrics& m, std::size_t points, std::size_t gt_points,
                                   double cap) {
  return {{"accuracy", m.accuracy},
          {"completeness", m.completeness},
          {"overall", m.overall},
          {"points", points},
          {"gt_points", gt_points},
          {"distance_cap", cap}};
}

}  // namespace pmvs
