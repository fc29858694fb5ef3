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

#include <gtest/gtest.h>

#include <cstring>

#include "support.hpp"

namespace pmvs {
namespace {

const char* kCam =
    "extrinsic\n"
    "1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n"
    "\n"
    "intrinsic\n"
    "100 0 31.5\n0 100 31.5\n0 0 1\n"
    "\n"
    "425.0 2.5\n";

float le_float(const char* p) {
  std::uint32_t bits = static_cast<std::uint8_t>(p[0]) | static_cast<std::uint8_t>(p[1]) << 8 |
                       static_cast<std::uint8_t>(p[2]) << 16 |
                       static_cast<std::uint32_t>(static_cast<std::uint8_t>(p[3])) << 24;
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

TEST(Pfm, OnePixelLayout) {
  Image img(1, 1, 1, 1.0);
  const std::string s = write_pfm_bytes(img);
  ASSERT_EQ(s.size(), 19u);
  EXPECT_EQ(s.substr(0, 15), "Pf\n1 1\n-1.0000\n");
  EXPECT_EQ(le_float(s.data() + 15), 1.0f);
}

TEST(Pfm, RoundTripsRandomImages) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> dim(1, 17);
  for (int t = 0; t < 100; ++t) {
    Image img = testing::random_image(rng, t % 2 ? 3 : 1, dim(rng), dim(rng));
    for (double& v : img.data()) v = static_cast<float>(v * 2000 - 1000);
    const Image back = read_pfm_bytes(write_pfm_bytes(img));
    ASSERT_EQ(back.channels(), img.channels());
    ASSERT_EQ(back.width(), img.width());
    EXPECT_EQ(back.data(), img.data());
  }
}

// Big-endian file built by hand: rows bottom to top.
TEST(Pfm, ReadsBigEndianBottomUp) {
  std::string s = "Pf\n1 2\n1.0\n";
  for (float f : {2.5f, -7.0f}) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int k = 3; k >= 0; --k) s.push_back(static_cast<char>((bits >> (8 * k)) & 0xFF));
  }
  const Image img = read_pfm_bytes(s);
  EXPECT_EQ(img.at(0, 0, 1), 2.5);
  EXPECT_EQ(img.at(0, 0, 0), -7.0);
}

TEST(Pfm, RejectsMalformedInput) {
  EXPECT_THROW(read_pfm_bytes("P6\n1 1\n-1\n0000"), ParseError);
  EXPECT_THROW(read_pfm_bytes("Pf\n1 1\n-1\n00"), ParseError);
  EXPECT_THROW(read_pfm_bytes("Pf\n0 1\n-1\n"), ParseError);
  EXPECT_THROW(read_pfm_bytes("Pf\n1 1\n0\n0000"), ParseError);
  EXPECT_THROW(read_pfm_bytes("Pf\n1 1"), ParseError);
}

TEST(Cam, TwoValueDepthLineUsesDefaultCount) {
  const CameraView v = parse_cam_file(kCam, 64, 64);
  EXPECT_DOUBLE_EQ(v.d_min(), 425.0);
  EXPECT_DOUBLE_EQ(v.interval(), 2.5);
  EXPECT_EQ(v.depth_count(), 192);
  EXPECT_DOUBLE_EQ(v.d_max(), 425.0 + 2.5 * 191);
  EXPECT_DOUBLE_EQ(v.intrinsic()(0, 2), 31.5);
}

TEST(Cam, RoundTripsRandomCameras) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const CameraView a = testing::random_camera(rng);
    const CameraView b = parse_cam_file(write_cam_file(a), a.width(), a.height());
    EXPECT_EQ(a.pose(), b.pose());
    EXPECT_EQ(a.intrinsic(), b.intrinsic());
    EXPECT_EQ(a.d_min(), b.d_min());
    EXPECT_EQ(a.d_max(), b.d_max());
    EXPECT_EQ(a.depth_count(), b.depth_count());
  }
}

TEST(Cam, ErrorsCarryTheLineNumber) {
  std::string bad = kCam;
  bad.replace(bad.find("0 1 0 0"), 7, "0 1 x 0");
  try {
    parse_cam_file(bad, 64, 64);
    FAIL() << "no exception";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::string short_row = kCam;
  short_row.replace(short_row.find("0 100 31.5"), 10, "0 100");
  try {
    parse_cam_file(short_row, 64, 64);
    FAIL() << "no exception";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 9u);
  }
  EXPECT_THROW(parse_cam_file(std::string(kCam) + "junk\n", 64, 64), ParseError);
  EXPECT_THROW(parse_cam_file("intrinsic\n", 64, 64), ParseError);
  std::string negative = kCam;
  negative.replace(negative.find("425.0 2.5"), 9, "425.0 -1");
  EXPECT_THROW(parse_cam_file(negative, 64, 64), ParseError);
}

TEST(Pair, RoundTripAndErrors) {
  const std::vector<ViewRanking> r{{0, {{1, 2.5}, {2, 0.25}}}, {1, {{0, 1.0}}}, {2, {}}};
  const auto back = parse_pair_file(write_pair_file(r));
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].ref, r[i].ref);
    EXPECT_EQ(back[i].sources, r[i].sources);
  }
  EXPECT_THROW(parse_pair_file("2\n0\n1 5 1.0\n1\n0\n"), ParseError);
  EXPECT_THROW(parse_pair_file("1\n0\n2 0 1.0\n"), ParseError);
  EXPECT_THROW(parse_pair_file("1\n0\n0\nextra\n"), ParseError);
}

// Reads the binary PLY through its own header parsing, independent of
// read_ply_bytes.
PointCloud independent_ply_read(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string line;
  std::size_t n = 0;
  std::vector<std::string> props;
  std::getline(in, line);
  EXPECT_EQ(line, "ply");
  while (std::getline(in, line) && line != "end_header") {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      EXPECT_EQ(fmt, "binary_little_endian");
    } else if (word == "element") {
      std::string name;
      ls >> name >> n;
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(type + " " + name);
    }
  }
  EXPECT_EQ(props, (std::vector<std::string>{"float x", "float y", "float z", "uchar red",
                                             "uchar green", "uchar blue"}));
  const std::size_t start = static_cast<std::size_t>(in.tellg());
  EXPECT_EQ(bytes.size() - start, n * 15);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    const char* p = bytes.data() + start + i * 15;
    c.add(Vec3(le_float(p), le_float(p + 4), le_float(p + 8)),
          Vec3(static_cast<std::uint8_t>(p[12]), static_cast<std::uint8_t>(p[13]),
               static_cast<std::uint8_t>(p[14])) / 255.0);
  }
  return c;
}

TEST(Ply, EmptyAndOnePointLayouts) {
  const std::string empty = write_ply_bytes(PointCloud{});
  EXPECT_EQ(empty, ply_header(0));
  EXPECT_TRUE(read_ply_bytes(empty).empty());
  PointCloud one;
  one.add(Vec3(1.5, -2, 600), Vec3(1, 0, 0.5));
  const std::string s = write_ply_bytes(one);
  EXPECT_EQ(s.size(), ply_header(1).size() + 15);
  const PointCloud c = independent_ply_read(s);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.points[0], Vec3(1.5, -2, 600));
  EXPECT_EQ(c.colors[0], Vec3(255, 0, 128) / 255.0);
}

TEST(Ply, RandomCloudsAgreeWithIndependentReader) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1000, 1000), c(0, 1);
  PointCloud cloud;
  for (int i = 0; i < 500; ++i) cloud.add(Vec3(u(rng), u(rng), u(rng)), Vec3(c(rng), c(rng), c(rng)));
  const std::string s = write_ply_bytes(cloud);
  const PointCloud a = independent_ply_read(s), b = read_ply_bytes(s);
  ASSERT_EQ(a.size(), cloud.size());
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.colors, b.colors);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    EXPECT_LT((a.points[i] - cloud.points[i]).cwiseAbs().maxCoeff(), 1e-4);
    EXPECT_LE((a.colors[i] - cloud.colors[i]).cwiseAbs().maxCoeff(), 0.5 / 255 + 1e-12);
  }
  EXPECT_THROW(read_ply_bytes("ply\nformat ascii 1.0\nend_header\n"), ParseError);
  EXPECT_THROW(read_ply_bytes(s.substr(0, s.size() - 1)), ParseError);
}

TEST(Tracks, RoundTrip) {
  SparseTrackSet t;
  t.points = {Vec3(0.1, 2, 600), Vec3(-5, 3.25, 800)};
  t.visibility = {{0, 1, 2}, {3, 4}};
  const SparseTrackSet back = parse_tracks(write_tracks(t));
  EXPECT_EQ(back.points, t.points);
  EXPECT_EQ(back.visibility, t.visibility);
  EXPECT_THROW(parse_tracks("1\n0 0 600 2 1\n"), ParseError);
}

TEST(DepthImage, InvalidPixelsStoredAsZero) {
  DepthMap d(2, 1, 600.0, true);
  d.mask.set(1, false);
  const Image img = depth_to_image(d);
  EXPECT_EQ(img.at(0, 1, 0), 0.0);
  const DepthMap back = depth_from_image(img);
  EXPECT_TRUE(back.mask[0]);
  EXPECT_FALSE(back.mask[1]);
  EXPECT_EQ(back.depth[0], 600.0);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  PipelineConfig c;
  c.views = 3;
  c.fusion.min_views = 2;
  c.stages = {{16, 3.0}, {8, 1.5}};
  c.loss.patch_size = 5;
  c.refine.iterations = 7;
  const nlohmann::json j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  nlohmann::json bad = j;
  bad["refine"]["iterationz"] = 3;
  EXPECT_THROW(config_from_json(bad), std::invalid_argument);
  nlohmann::json top = j;
  top["extra"] = 1;
  EXPECT_THROW(config_from_json(top), std::invalid_argument);
  EXPECT_EQ(config_from_json(nlohmann::json::object()).views, PipelineConfig{}.views);
}

TEST(Dataset, WriteReadRoundTrip) {
  const SceneBundle b = generate_scene(testing::small_scene(16));
  const Dataset d = dataset_from_bundle(b);
  const auto root = std::filesystem::temp_directory_path() / "patchmvs_io_dataset";
  std::filesystem::remove_all(root);
  write_dataset(root, d, scene_summary(b.spec));
  const Dataset r = read_dataset(root);
  ASSERT_EQ(r.views.size(), d.views.size());
  for (std::size_t i = 0; i < d.views.size(); ++i) {
    EXPECT_EQ(r.views[i].image.data(), d.views[i].image.data());
    EXPECT_EQ(r.views[i].camera.pose(), d.views[i].camera.pose());
    EXPECT_EQ(r.gt_depths[i].mask.count(), d.gt_depths[i].mask.count());
  }
  ASSERT_TRUE(r.tracks && r.gt_cloud);
  EXPECT_EQ(r.tracks->visibility, d.tracks->visibility);
  EXPECT_EQ(r.gt_cloud->size(), d.gt_cloud->size());
  std::filesystem::remove_all(root);
}

}  // namespace
}  // namespace pmvs
