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

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "patchmvs/fusion.hpp"
#include "patchmvs/geometry.hpp"
#include "patchmvs/image.hpp"
#include "patchmvs/plane_sweep.hpp"
#include "patchmvs/view_selection.hpp"

namespace pmvs {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

struct LineReader {
  explicit LineReader(const std::string& text) : in(text) {}

  // Next non-blank line, or false at end of input.
  bool next(std::string& out) {
    while (std::getline(in, out)) {
      ++line;
      if (!out.empty() && out.back() == '\r') out.pop_back();
      if (out.find_first_not_of(" \t") != std::string::npos) return true;
    }
    return false;
  }

  std::string expect() {
    std::string s;
    if (!next(s)) throw ParseError("unexpected end of input", line + 1);
    return s;
  }

  template <typename T>
  std::vector<T> numbers(const std::string& s) {
    std::istringstream ls(s);
    std::vector<T> out;
    T v;
    while (ls >> v) out.push_back(v);
    if (!ls.eof()) throw ParseError("malformed number", line);
    return out;
  }

  std::istringstream in;
  int line = 0;
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace detail

// `extrinsic` (4x4 world-to-camera), `intrinsic` (3x3), then
// `d_min interval [n d_max]`. Image size is not part of the format.
inline CameraView parse_cam_file(const std::string& text, int width, int height) {
  detail::LineReader r(text);
  if (detail::trim(r.expect()) != "extrinsic") throw ParseError("expected 'extrinsic'", r.line);
  Mat4 pose;
  for (int i = 0; i < 4; ++i) {
    const auto row = r.numbers<double>(r.expect());
    if (row.size() != 4) throw ParseError("extrinsic row needs 4 values", r.line);
    for (int j = 0; j < 4; ++j) pose(i, j) = row[j];
  }
  if (detail::trim(r.expect()) != "intrinsic") throw ParseError("expected 'intrinsic'", r.line);
  Mat3 k;
  for (int i = 0; i < 3; ++i) {
    const auto row = r.numbers<double>(r.expect());
    if (row.size() != 3) throw ParseError("intrinsic row needs 3 values", r.line);
    for (int j = 0; j < 3; ++j) k(i, j) = row[j];
  }
  const auto range = r.numbers<double>(r.expect());
  const int range_line = r.line;
  if (range.size() != 2 && range.size() != 4)
    throw ParseError("depth line needs 'd_min interval [n d_max]'", range_line);
  std::string extra;
  if (r.next(extra)) throw ParseError("trailing content", r.line);
  const double d_min = range[0], interval = range[1];
  int n = CameraView::kDefaultDepthCount;
  double d_max = d_min + interval * (n - 1);
  if (range.size() == 4) {
    if (range[2] != std::floor(range[2]) || range[2] < 2)
      throw ParseError("depth count must be an integer >= 2", range_line);
    n = static_cast<int>(range[2]);
    d_max = range[3];
  }
  if (!(interval > 0.0)) throw ParseError("interval must be positive", range_line);
  try {
    return CameraView(k, pose, width, height, d_min, d_max, interval, n);
  } catch (const std::invalid_argument& e) {
    throw ParseError(e.what(), range_line);
  }
}

inline std::string write_cam_file(const CameraView& v) {
  std::string s = "extrinsic\n";
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) s += format_double(v.pose()(i, j)) + (j < 3 ? " " : "\n");
  }
  s += "\nintrinsic\n";
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) s += format_double(v.intrinsic()(i, j)) + (j < 2 ? " " : "\n");
  }
  s += "\n" + format_double(v.d_min()) + " " + format_double(v.interval()) + " " +
       std::to_string(v.depth_count()) + " " + format_double(v.d_max()) + "\n";
  return s;
}

// First line: view count; then per reference an id line and a line
// `k src score src score ...`.
inline std::vector<ViewRanking> parse_pair_file(const std::string& text) {
  detail::LineReader r(text);
  const auto head = r.numbers<long long>(r.expect());
  if (head.size() != 1 || head[0] < 0) throw ParseError("expected the view count", r.line);
  const long long n = head[0];
  std::vector<ViewRanking> out;
  for (long long v = 0; v < n; ++v) {
    const auto id = r.numbers<long long>(r.expect());
    if (id.size() != 1) throw ParseError("expected a reference id", r.line);
    if (id[0] < 0 || id[0] >= n) throw ParseError("reference id out of range", r.line);
    ViewRanking vr;
    vr.ref = static_cast<int>(id[0]);
    const std::string line = r.expect();
    std::istringstream ls(line);
    long long k;
    if (!(ls >> k) || k < 0) throw ParseError("expected the source count", r.line);
    for (long long j = 0; j < k; ++j) {
      long long src;
      double score;
      if (!(ls >> src >> score)) throw ParseError("expected 'id score' pairs", r.line);
      if (src < 0 || src >= n) throw ParseError("source id out of range", r.line);
      vr.sources.emplace_back(static_cast<int>(src), score);
    }
    std::string rest;
    if (ls >> rest) throw ParseError("trailing content", r.line);
    out.push_back(std::move(vr));
  }
  std::string extra;
  if (r.next(extra)) throw ParseError("trailing content", r.line);
  return out;
}

inline std::string write_pair_file(const std::vector<ViewRanking>& rankings) {
  std::string s = std::to_string(rankings.size()) + "\n";
  for (const auto& vr : rankings) {
    s += std::to_string(vr.ref) + "\n" + std::to_string(vr.sources.size());
    for (const auto& [id, score] : vr.sources) s += " " + std::to_string(id) + " " + format_double(score);
    s += "\n";
  }
  return s;
}

// PFM: `Pf` (1 channel) or `PF` (3 channels, interleaved), `W H`, scale;
// negative scale means little-endian. Rows run bottom to top. Samples are
// stored as float32.
inline std::string write_pfm_bytes(const Image& img) {
  require(img.channels() == 1 || img.channels() == 3, "write_pfm: need 1 or 3 channels");
  std::string s = img.channels() == 1 ? "Pf\n" : "PF\n";
  s += std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n-1.0000\n";
  const std::size_t header = s.size();
  s.resize(header + img.data().size() * 4);
  char* p = s.data() + header;
  for (int y = img.height() - 1; y >= 0; --y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < img.channels(); ++c) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(img.at(c, x, y)));
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
        std::memcpy(p, &bits, 4);
        p += 4;
      }
  return s;
}

inline Image read_pfm_bytes(const std::string& bytes) {
  std::size_t pos = 0;
  int line = 0;
  const auto token_line = [&]() {
    const auto e = bytes.find('\n', pos);
    if (e == std::string::npos) throw ParseError("truncated PFM header", line + 1);
    std::string t = bytes.substr(pos, e - pos);
    if (!t.empty() && t.back() == '\r') t.pop_back();
    pos = e + 1;
    ++line;
    return t;
  };
  const std::string magic = detail::trim(token_line());
  int channels;
  if (magic == "Pf") channels = 1;
  else if (magic == "PF") channels = 3;
  else throw ParseError("bad PFM magic", line);
  std::istringstream dims(token_line());
  long long w = 0, h = 0;
  std::string rest;
  if (!(dims >> w >> h) || (dims >> rest) || w <= 0 || h <= 0 || w > (1 << 20) || h > (1 << 20))
    throw ParseError("bad PFM dimensions", line);
  std::istringstream sc(token_line());
  double scale = 0.0;
  if (!(sc >> scale) || (sc >> rest) || scale == 0.0) throw ParseError("bad PFM scale", line);
  const bool little = scale < 0.0;
  const std::size_t need = static_cast<std::size_t>(w) * h * channels * 4;
  if (bytes.size() - pos != need) throw ParseError("PFM payload size mismatch", line);
  Image img(channels, static_cast<int>(w), static_cast<int>(h));
  const char* p = bytes.data() + pos;
  const bool swap = little != (std::endian::native == std::endian::little);
  for (long long y = h - 1; y >= 0; --y)
    for (long long x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        std::uint32_t bits;
        std::memcpy(&bits, p, 4);
        p += 4;
        if (swap) bits = __builtin_bswap32(bits);
        img.at(c, static_cast<int>(x), static_cast<int>(y)) = std::bit_cast<float>(bits);
      }
  return img;
}

inline void write_pfm(const std::filesystem::path& path, const Image& img) {
  write_file(path, write_pfm_bytes(img));
}

inline Image read_pfm(const std::filesystem::path& path) { return read_pfm_bytes(read_file(path)); }

// Depth maps are stored with 0 at invalid pixels.
inline Image depth_to_image(const DepthMap& d) {
  Image img(1, d.width, d.height);
  for (std::size_t i = 0; i < d.depth.size(); ++i) img.channel(0)[i] = d.mask[i] ? d.depth[i] : 0.0;
  return img;
}

inline DepthMap depth_from_image(const Image& img) {
  require(img.channels() == 1, "depth map image must have one channel");
  DepthMap d(img.width(), img.height());
  for (std::size_t i = 0; i < d.depth.size(); ++i) {
    const double v = img.channel(0)[i];
    d.depth[i] = v;
    d.mask.set(i, v > 0.0 && std::isfinite(v));
  }
  return d;
}

inline std::string ply_header(std::size_t n) {
  return "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(n) +
         "\nproperty float x\nproperty float y\nproperty float z\n"
         "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
}

inline std::uint8_t color_byte(double c) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0));
}

inline std::string write_ply_bytes(const PointCloud& cloud) {
  std::string s = ply_header(cloud.size());
  const std::size_t header = s.size();
  s.resize(header + cloud.size() * 15);
  char* p = s.data() + header;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(cloud.points[i][k]));
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      std::memcpy(p, &bits, 4);
      p += 4;
    }
    for (int k = 0; k < 3; ++k) *p++ = static_cast<char>(color_byte(cloud.colors[i][k]));
  }
  return s;
}

// Reads back the exact layout produced by write_ply_bytes.
inline PointCloud read_ply_bytes(const std::string& bytes) {
  const std::string end = "end_header\n";
  const auto e = bytes.find(end);
  if (e == std::string::npos) throw ParseError("PLY header not terminated", 1);
  std::istringstream hs(bytes.substr(0, e));
  std::string line;
  int ln = 0;
  long long n = -1;
  while (std::getline(hs, line)) {
    ++ln;
    if (ln == 1 && line != "ply") throw ParseError("bad PLY magic", ln);
    if (ln == 2 && line != "format binary_little_endian 1.0")
      throw ParseError("unsupported PLY format", ln);
    if (line.rfind("element vertex ", 0) == 0) n = std::stoll(line.substr(15));
  }
  if (n < 0) throw ParseError("missing vertex count", ln);
  if (bytes.substr(0, e + end.size()) != ply_header(static_cast<std::size_t>(n)))
    throw ParseError("unsupported PLY vertex layout", ln);
  const std::size_t pos = e + end.size();
  if (bytes.size() - pos != static_cast<std::size_t>(n) * 15)
    throw ParseError("PLY payload size mismatch", ln);
  PointCloud cloud;
  const char* p = bytes.data() + pos;
  for (long long i = 0; i < n; ++i) {
    Vec3 xyz, rgb;
    for (int k = 0; k < 3; ++k) {
      std::uint32_t bits;
      std::memcpy(&bits, p, 4);
      p += 4;
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      xyz[k] = std::bit_cast<float>(bits);
    }
    for (int k = 0; k < 3; ++k) rgb[k] = static_cast<std::uint8_t>(*p++) / 255.0;
    cloud.add(xyz, rgb);
  }
  return cloud;
}

inline void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  write_file(path, write_ply_bytes(cloud));
}

inline PointCloud read_ply(const std::filesystem::path& path) { return read_ply_bytes(read_file(path)); }

// `count`, then one `X Y Z k id ...` line per track.
inline std::string write_tracks(const SparseTrackSet& t) {
  std::string s = std::to_string(t.points.size()) + "\n";
  for (std::size_t i = 0; i < t.points.size(); ++i) {
    s += format_double(t.points[i].x()) + " " + format_double(t.points[i].y()) + " " +
         format_double(t.points[i].z()) + " " + std::to_string(t.visibility[i].size());
    for (int id : t.visibility[i]) s += " " + std::to_string(id);
    s += "\n";
  }
  return s;
}

inline SparseTrackSet parse_tracks(const std::string& text) {
  detail::LineReader r(text);
  const auto head = r.numbers<long long>(r.expect());
  if (head.size() != 1 || head[0] < 0) throw ParseError("expected the track count", r.line);
  SparseTrackSet t;
  for (long long i = 0; i < head[0]; ++i) {
    std::istringstream ls(r.expect());
    Vec3 p;
    long long k;
    if (!(ls >> p.x() >> p.y() >> p.z() >> k) || k < 0) throw ParseError("malformed track", r.line);
    std::vector<int> ids;
    for (long long j = 0; j < k; ++j) {
      int id;
      if (!(ls >> id)) throw ParseError("missing view id", r.line);
      ids.push_back(id);
    }
    t.points.push_back(p);
    t.visibility.push_back(std::move(ids));
  }
  return t;
}

}  // namespace pmvs
