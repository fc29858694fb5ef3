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

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include <CLI11.hpp>

#include "patchmvs/patchmvs.hpp"

namespace fs = std::filesystem;
using namespace pmvs;

namespace {

struct PipelineFlags {
  std::string config;
  std::optional<int> views, consistency, patch, stages, workers;
};

void add_pipeline_flags(CLI::App* app, PipelineFlags& f) {
  app->add_option("--config", f.config, "JSON configuration file")->check(CLI::ExistingFile);
  app->add_option("--views", f.views, "photometric sources per reference (N1)")->check(CLI::PositiveNumber);
  app->add_option("--consistency", f.consistency, "views that must agree in fusion (N2)")
      ->check(CLI::PositiveNumber);
  app->add_option("--patch", f.patch, "patch size m (odd)")->check(CLI::PositiveNumber);
  app->add_option("--stages", f.stages, "number of coarse-to-fine stages")->check(CLI::PositiveNumber);
  app->add_option("--workers", f.workers, "parallel depth jobs")->check(CLI::PositiveNumber);
}

PipelineConfig load_config(const PipelineFlags& f) {
  PipelineConfig c;
  if (!f.config.empty()) c = config_from_json(nlohmann::json::parse(read_file(f.config)));
  if (f.views) c.views = *f.views;
  if (f.consistency) c.fusion.min_views = *f.consistency;
  if (f.patch) c.loss.patch_size = *f.patch;
  if (f.workers) c.workers = *f.workers;
  if (f.stages) {
    if (*f.stages > static_cast<int>(c.stages.size()))
      throw std::invalid_argument("--stages exceeds the configured schedule");
    c.stages.resize(*f.stages);
  }
  c.validate();
  return c;
}

std::vector<DepthMap> read_depths(const fs::path& dir, std::size_t n) {
  std::vector<DepthMap> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(depth_from_image(read_pfm(dir / view_name(static_cast<int>(i), ".pfm"))));
  return out;
}

// Uniform noise of +- amplitude on every valid pixel.
DepthMap perturbed(DepthMap d, double amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  for (std::size_t i = 0; i < d.depth.size(); ++i)
    if (d.mask[i]) d.depth[i] += u(rng);
  return d;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-consistency multi-view stereo"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_out, scene_kind = "two_plane";
  std::uint64_t seed = 7;
  int size = 64;
  synth->add_option("--out", synth_out, "dataset directory")->required();
  synth->add_option("--seed", seed, "scene seed");
  synth->add_option("--scene", scene_kind, "two_plane or weak_texture")
      ->check(CLI::IsMember({"two_plane", "weak_texture"}));
  synth->add_option("--size", size, "image width and height")->check(CLI::Range(8, 4096));

  // depth
  auto* depth = app.add_subcommand("depth", "estimate per-view depth maps");
  std::string data_dir, depth_out;
  PipelineFlags depth_flags;
  depth->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  depth->add_option("--out", depth_out, "output directory")->required();
  add_pipeline_flags(depth, depth_flags);

  // fuse
  auto* fuse = app.add_subcommand("fuse", "fuse depth maps into a point cloud");
  std::string fuse_depth, fuse_out;
  PipelineFlags fuse_flags;
  fuse->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  fuse->add_option("--depth", fuse_depth, "directory written by `depth`")->required()
      ->check(CLI::ExistingDirectory);
  fuse->add_option("--out", fuse_out, "output PLY")->required();
  add_pipeline_flags(fuse, fuse_flags);

  // eval
  auto* eval = app.add_subcommand("eval", "accuracy and completeness against ground truth");
  std::string eval_cloud, eval_gt, eval_out, eval_config;
  std::optional<double> eval_cap;
  eval->add_option("--cloud", eval_cloud, "reconstructed PLY")->required()->check(CLI::ExistingFile);
  eval->add_option("--gt", eval_gt, "ground-truth PLY")->required()->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "metrics JSON (stdout if omitted)");
  eval->add_option("--config", eval_config, "JSON configuration file")->check(CLI::ExistingFile);
  eval->add_option("--cap", eval_cap, "distance cap")->check(CLI::PositiveNumber);

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "analytic vs finite-difference loss gradient");
  std::string grad_config, grad_depth;
  int grad_ref = 0, grad_samples = 1000;
  double grad_perturb = 0.5, grad_tol = 1e-3;
  std::uint64_t grad_seed = 1;
  bool grad_merge = false;
  grad->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  grad->add_option("--depth", grad_depth, "depth directory (ground truth if omitted)")
      ->check(CLI::ExistingDirectory);
  grad->add_option("--config", grad_config, "JSON configuration file")->check(CLI::ExistingFile);
  grad->add_option("--ref", grad_ref, "reference view id")->check(CLI::NonNegativeNumber);
  grad->add_option("--samples", grad_samples, "pixels to compare")->check(CLI::PositiveNumber);
  grad->add_option("--perturb", grad_perturb, "uniform depth noise, in depth intervals");
  grad->add_option("--tolerance", grad_tol, "relative error tolerance")->check(CLI::PositiveNumber);
  grad->add_option("--seed", grad_seed, "sampling seed");
  grad->add_flag("--merge", grad_merge, "merge patches with the next-coarser scale");

  // lossmap
  auto* lossmap = app.add_subcommand("lossmap", "write per-term loss maps as PFM");
  std::string lm_config, lm_depth, lm_out;
  int lm_ref = 0;
  lossmap->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  lossmap->add_option("--depth", lm_depth, "depth directory (ground truth if omitted)")
      ->check(CLI::ExistingDirectory);
  lossmap->add_option("--out", lm_out, "output directory")->required();
  lossmap->add_option("--config", lm_config, "JSON configuration file")->check(CLI::ExistingFile);
  lossmap->add_option("--ref", lm_ref, "reference view id")->check(CLI::NonNegativeNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      SceneSpec spec = scene_kind == "weak_texture" ? SceneSpec::weak_texture(seed)
                                                    : SceneSpec::two_plane(seed);
      spec.focal *= static_cast<double>(size) / spec.width;
      spec.width = spec.height = size;
      const SceneBundle b = generate_scene(spec);
      write_dataset(synth_out, dataset_from_bundle(b), scene_summary(spec));
      print_json({{"views", b.views.size()}, {"gt_points", b.gt_cloud.size()}});
      return 0;
    }

    if (depth->parsed()) {
      const PipelineConfig cfg = load_config(depth_flags);
      const Dataset ds = read_dataset(data_dir);
      const DepthEstimate est = estimate_depths(ds.views, ds.pairs, cfg);
      const fs::path out = depth_out;
      for (std::size_t i = 0; i < est.depth.size(); ++i) {
        const int id = static_cast<int>(i);
        write_pfm(out / "depth" / view_name(id, ".pfm"), depth_to_image(est.depth[i]));
        const DepthMap& d = est.depth[i];
        Image conf(1, d.width, d.height);
        for (std::size_t p = 0; p < d.confidence.size(); ++p) conf.channel(0)[p] = d.confidence[p];
        write_pfm(out / "confidence" / view_name(id, ".pfm"), conf);
      }
      write_file(out / "config.json", config_to_json(cfg).dump(2) + "\n");
      print_json({{"views", est.depth.size()}, {"stages", est.stages.size()}});
      return 0;
    }

    if (fuse->parsed()) {
      const PipelineConfig cfg = load_config(fuse_flags);
      const Dataset ds = read_dataset(data_dir);
      const auto depths = read_depths(fs::path(fuse_depth) / "depth", ds.views.size());
      const PointCloud cloud = fuse_dataset(ds.views, depths, cfg.fusion);
      write_ply(fuse_out, cloud);
      print_json({{"points", cloud.size()}, {"consistency", cfg.fusion.min_views}});
      return 0;
    }

    if (eval->parsed()) {
      PipelineConfig cfg;
      if (!eval_config.empty()) cfg = config_from_json(nlohmann::json::parse(read_file(eval_config)));
      const double cap = eval_cap.value_or(cfg.eval_cap);
      const PointCloud cloud = read_ply(eval_cloud), gt = read_ply(eval_gt);
      const auto j = metrics_json(evaluate(cloud, gt, cap), cloud.size(), gt.size(), cap);
      if (eval_out.empty()) print_json(j);
      else write_file(eval_out, j.dump(2) + "\n");
      return 0;
    }

    if (grad->parsed() || lossmap->parsed()) {
      const bool is_grad = grad->parsed();
      const std::string& cfg_path = is_grad ? grad_config : lm_config;
      const std::string& depth_dir = is_grad ? grad_depth : lm_depth;
      const int ref = is_grad ? grad_ref : lm_ref;
      PipelineConfig cfg;
      if (!cfg_path.empty()) cfg = config_from_json(nlohmann::json::parse(read_file(cfg_path)));
      const Dataset ds = read_dataset(data_dir);
      if (ref >= static_cast<int>(ds.views.size())) throw std::invalid_argument("--ref out of range");
      std::vector<DepthMap> depths;
      if (!depth_dir.empty()) depths = read_depths(fs::path(depth_dir) / "depth", ds.views.size());
      else depths = ds.gt_depths;
      if (depths.size() != ds.views.size())
        throw std::invalid_argument("no depth maps: pass --depth or use a dataset with ground truth");
      const auto sources = ranked_sources(ds.pairs, ref, cfg.views);
      const int best = sources.front();
      const PairObjective obj = make_pair_objective(ds.views, ref, sources, best, cfg.loss,
                                                    default_extractor(), is_grad && grad_merge);
      if (is_grad) {
        const double amp = grad_perturb * ds.views[ref].camera.interval();
        const DepthMap dr = perturbed(depths[ref], amp, grad_seed);
        const DepthMap ds_best = perturbed(depths[best], amp, grad_seed + 1);
        const auto rep = gradient_check(obj, dr, ds_best, static_cast<std::size_t>(grad_samples),
                                        grad_seed, 1e-4, grad_tol);
        const bool pass = rep.compared > 0 && rep.pass_fraction() >= 0.99;
        print_json({{"compared", rep.compared},
                    {"examined", rep.examined},
                    {"kinks", rep.kinks},
                    {"passed", rep.passed},
                    {"pass_fraction", rep.pass_fraction()},
                    {"max_relative_error", rep.max_relative_error},
                    {"tolerance", rep.tolerance},
                    {"result", pass ? "pass" : "fail"}});
        return pass ? 0 : 1;
      }
      const auto e = obj.evaluate(depths[ref], depths[best]);
      const fs::path out = lm_out;
      nlohmann::json summary;
      for (std::size_t t = 0; t < kTermCount; ++t) {
        if (!e.ref.active[t]) continue;
        const LossReport& r = e.ref.terms[t];
        Image map = r.map;
        for (std::size_t i = 0; i < r.mask.size(); ++i)
          if (!r.mask[i]) map.channel(0)[i] = 0.0;
        write_pfm(out / (std::string(kTermNames[t]) + ".pfm"), map);
        summary[kTermNames[t]] = r.scalar;
      }
      write_pfm(out / "total.pfm", e.ref.attribution);
      summary["total"] = e.ref.total;
      print_json(summary);
      return 0;
    }
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
