#pragma once

// Scene-directory ingestion and the run-directory artifact formats.
//
// Scene directory:
//   images/view_{k}.png          training images
//   images/test_{k}.png          held-out images (optional)
//   pairs/{n}_{m}.{x,y,z}.pfm    both pointmaps of a pair, in view n's frame;
//   pairs/{n}_{m}.{cn,cm}.pfm    x/y/z hold [pointmap_n | pointmap_m] side by side
//   mono/view_{k}.pfm            mono inverse depth, image resolution
//   gt/poses.json                {"focal", "views": [4x4], "tests": [4x4]}
//   config.json                  {"n_views", "n_test", ...}
//
// Poses are serialized as 4x4 row-major world-to-camera matrices.

#include "json.hpp"

#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "d2t/coarse_init.hpp"
#include "d2t/core_geometry.hpp"
#include "d2t/errors.hpp"
#include "d2t/image_io.hpp"
#include "d2t/optimizer.hpp"
#include "d2t/splat_renderer.hpp"

namespace d2t {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline json pose_to_json(const Pose& p) {
  const Mat4 m = p.matrix();
  json rows = json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
  return rows;
}

inline Pose pose_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ValidationError("pose: expected a 4x4 array");
  Mat4 m;
  for (int r = 0; r < 4; ++r) {
    if (!j[r].is_array() || j[r].size() != 4) throw ValidationError("pose: expected a 4x4 array");
    for (int c = 0; c < 4; ++c) m(r, c) = j[r][c].get<double>();
  }
  Pose p = Pose::from_matrix(m);
  p.enforce_rotation(1e-6);
  return p;
}

inline json poses_to_json(const std::vector<Pose>& poses) {
  json a = json::array();
  for (const auto& p : poses) a.push_back(pose_to_json(p));
  return a;
}

inline std::vector<Pose> poses_from_json(const json& j) {
  std::vector<Pose> out;
  for (const auto& e : j) out.push_back(pose_from_json(e));
  return out;
}

inline json read_json(const fs::path& path) {
  const std::string text = io::read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), e.byte, e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { io::write_atomic(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// model.bin: "D2TG" magic, u32 version (1), u64 count, then per Gaussian 14
// little-endian f32: position x3, log_scale x3, quaternion (w, x, y, z),
// opacity logit, color x3.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}
inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string file) : b_(bytes), file_(std::move(file)) {}
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw ParseError(file_, b_.size(), std::string("truncated ") + what);
  }
  std::uint64_t uint(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int k = 0; k < bytes; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + k])) << (8 * k);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  float f32(const char* what) {
    const auto bits = static_cast<std::uint32_t>(uint(4, what));
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64(const char* what) {
    const std::uint64_t bits = uint(8, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  void magic(const char* m) {
    need(4, "magic");
    if (b_.compare(pos_, 4, m) != 0) throw ParseError(file_, pos_, std::string("expected magic ") + m);
    pos_ += 4;
  }
  std::size_t pos() const { return pos_; }
  const std::string& file() const { return file_; }

 private:
  const std::string& b_;
  std::string file_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_model(const GaussianCloud& c) {
  std::string out = "D2TG";
  detail::put_u32(out, 1);
  detail::put_u64(out, c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    float v[14];
    for (int k = 0; k < 3; ++k) v[k] = static_cast<float>(c.position[i][k]);
    for (int k = 0; k < 3; ++k) v[3 + k] = static_cast<float>(c.log_scale[i][k]);
    for (int k = 0; k < 4; ++k) v[6 + k] = static_cast<float>(c.rotation[i][k]);
    v[10] = static_cast<float>(c.opacity_logit[i]);
    for (int k = 0; k < 3; ++k) v[11 + k] = static_cast<float>(c.color[i][k]);
    for (float f : v) io::detail::append_f32_le(out, f);
  }
  return out;
}

inline GaussianCloud decode_model(const std::string& bytes, const std::string& file) {
  detail::Reader r(bytes, file);
  r.magic("D2TG");
  const auto version = r.uint(4, "version");
  if (version != 1) throw ParseError(file, 4, "unsupported model version " + std::to_string(version));
  const auto n = r.uint(8, "count");
  r.need(n * 14 * 4, "gaussian records");
  GaussianCloud c;
  for (std::uint64_t i = 0; i < n; ++i) {
    float v[14];
    for (float& f : v) f = r.f32("gaussian record");
    c.push_back(Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5]), Quat(v[6], v[7], v[8], v[9]), v[10],
                Vec3(v[11], v[12], v[13]));
  }
  return c;
}

inline void write_model(const fs::path& path, const GaussianCloud& c) { io::write_atomic(path, encode_model(c)); }
inline GaussianCloud read_model(const fs::path& path) { return decode_model(io::read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Full-precision trainer checkpoint (doubles, optimizer moments included) so a
// later stage resumes exactly where the previous one stopped.

inline std::string encode_checkpoint(const TrainerState& s) {
  std::string out = "D2TC";
  detail::put_u32(out, 1);
  detail::put_u64(out, s.cloud.size());
  detail::put_u64(out, s.poses.size());
  detail::put_u64(out, static_cast<std::uint64_t>(s.step));
  detail::put_f64(out, s.scene_extent);
  for (std::size_t i = 0; i < s.cloud.size(); ++i) {
    for (int k = 0; k < 3; ++k) detail::put_f64(out, s.cloud.position[i][k]);
    for (int k = 0; k < 3; ++k) detail::put_f64(out, s.cloud.log_scale[i][k]);
    for (int k = 0; k < 4; ++k) detail::put_f64(out, s.cloud.rotation[i][k]);
    detail::put_f64(out, s.cloud.opacity_logit[i]);
    for (int k = 0; k < 3; ++k) detail::put_f64(out, s.cloud.color[i][k]);
  }
  for (const auto& p : s.poses) {
    const Mat4 m = p.matrix();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) detail::put_f64(out, m(r, c));
  }
  auto put_moments = [&](const detail::AdamMoments& m) {
    detail::put_u64(out, m.m.size());
    for (double v : m.m) detail::put_f64(out, v);
    for (double v : m.v) detail::put_f64(out, v);
  };
  for (const auto* m : {&s.m_position, &s.m_scale, &s.m_rotation, &s.m_opacity, &s.m_color}) put_moments(*m);
  detail::put_u64(out, s.m_pose.size());
  for (std::size_t v = 0; v < s.m_pose.size(); ++v) {
    put_moments(s.m_pose[v]);
    detail::put_u64(out, static_cast<std::uint64_t>(s.pose_steps[v]));
  }
  return out;
}

inline TrainerState decode_checkpoint(const std::string& bytes, const std::string& file) {
  detail::Reader r(bytes, file);
  r.magic("D2TC");
  if (r.uint(4, "version") != 1) throw ParseError(file, 4, "unsupported checkpoint version");
  TrainerState s;
  const auto n = r.uint(8, "count");
  const auto nv = r.uint(8, "pose count");
  s.step = static_cast<long>(r.uint(8, "step"));
  s.scene_extent = r.f64("extent");
  s.cloud.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) s.cloud.position[i][k] = r.f64("cloud");
    for (int k = 0; k < 3; ++k) s.cloud.log_scale[i][k] = r.f64("cloud");
    for (int k = 0; k < 4; ++k) s.cloud.rotation[i][k] = r.f64("cloud");
    s.cloud.opacity_logit[i] = r.f64("cloud");
    for (int k = 0; k < 3; ++k) s.cloud.color[i][k] = r.f64("cloud");
  }
  for (std::size_t v = 0; v < nv; ++v) {
    Mat4 m = Mat4::Identity();
    for (int row = 0; row < 3; ++row)
      for (int c = 0; c < 4; ++c) m(row, c) = r.f64("pose");
    s.poses.push_back(Pose::from_matrix(m));
  }
  auto get_moments = [&](detail::AdamMoments& m) {
    const auto k = r.uint(8, "moments");
    r.need(k * 16, "moments");
    m.m.resize(k);
    m.v.resize(k);
    for (auto& v : m.m) v = r.f64("moments");
    for (auto& v : m.v) v = r.f64("moments");
  };
  for (auto* m : {&s.m_position, &s.m_scale, &s.m_rotation, &s.m_opacity, &s.m_color}) get_moments(*m);
  const auto np = r.uint(8, "pose moments");
  s.m_pose.resize(np);
  s.pose_steps.resize(np);
  for (std::size_t v = 0; v < np; ++v) {
    get_moments(s.m_pose[v]);
    s.pose_steps[v] = static_cast<long>(r.uint(8, "pose steps"));
  }
  return s;
}

inline json trace_record_json(const TraceRecord& r) {
  return json{{"step", r.step},           {"stage", r.stage},         {"view", r.view},
              {"novel", r.novel},         {"loss_rgb", r.loss_rgb},   {"loss_depth", r.loss_depth},
              {"loss_train", r.loss_train}, {"loss_pseudo", r.loss_pseudo}, {"loss_total", r.loss_total}};
}

inline std::string encode_trace(const std::vector<TraceRecord>& trace) {
  std::string out;
  for (const auto& r : trace) out += trace_record_json(r).dump() + "\n";
  return out;
}

inline std::vector<TraceRecord> decode_trace(const std::string& text, const std::string& file) {
  std::vector<TraceRecord> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find('\n', pos);
    const std::string line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    if (!line.empty()) {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw ParseError(file, pos + e.byte, e.what());
      }
      TraceRecord r;
      r.step = j.at("step");
      r.stage = j.at("stage");
      r.view = j.at("view");
      r.novel = j.at("novel");
      r.loss_rgb = j.at("loss_rgb");
      r.loss_depth = j.at("loss_depth");
      r.loss_train = j.at("loss_train");
      r.loss_pseudo = j.at("loss_pseudo");
      r.loss_total = j.at("loss_total");
      out.push_back(r);
    }
    if (end == std::string::npos) break;
    pos = end + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene ingestion.

struct GroundTruth {
  double focal = 0.0;  // image resolution
  std::vector<Pose> views;
  std::vector<Pose> tests;
};

struct SceneBundle {
  std::vector<ColorImage> images;
  std::vector<ColorImage> test_images;
  ViewGraph graph;
  std::vector<ScalarMap> mono;
  std::optional<GroundTruth> gt;
  std::vector<std::string> warnings;

  int n_views() const { return static_cast<int>(images.size()); }
};

inline fs::path image_path(const fs::path& dir, int k) { return dir / "images" / ("view_" + std::to_string(k) + ".png"); }
inline fs::path test_image_path(const fs::path& dir, int k) { return dir / "images" / ("test_" + std::to_string(k) + ".png"); }
inline fs::path mono_path(const fs::path& dir, int k) { return dir / "mono" / ("view_" + std::to_string(k) + ".pfm"); }
inline fs::path pair_path(const fs::path& dir, int n, int m, const std::string& channel) {
  return dir / "pairs" / (std::to_string(n) + "_" + std::to_string(m) + "." + channel + ".pfm");
}

inline const std::vector<std::string>& pair_channels() {
  static const std::vector<std::string> c{"x", "y", "z", "cn", "cm"};
  return c;
}

inline json ground_truth_to_json(const GroundTruth& gt) {
  return json{{"focal", gt.focal}, {"views", poses_to_json(gt.views)}, {"tests", poses_to_json(gt.tests)}};
}

inline GroundTruth ground_truth_from_json(const json& j) {
  GroundTruth gt;
  gt.focal = j.value("focal", 0.0);
  gt.views = poses_from_json(j.at("views"));
  if (j.contains("tests")) gt.tests = poses_from_json(j.at("tests"));
  return gt;
}

// Pointmap pair channels x/y/z are stored as (2W x H) maps holding pointmap_n
// in the left half and pointmap_m in the right half.
inline void write_pair(const fs::path& dir, const PairPrediction& p) {
  const int w = p.width(), h = p.height();
  for (int c = 0; c < 3; ++c) {
    ScalarMap m(2 * w, h);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        m(x, y) = p.pointmap_n(x, y)[c];
        m(w + x, y) = p.pointmap_m(x, y)[c];
      }
    }
    io::write_pfm(pair_path(dir, p.view_n, p.view_m, pair_channels()[static_cast<std::size_t>(c)]), m);
  }
  io::write_pfm(pair_path(dir, p.view_n, p.view_m, "cn"), p.confidence_n);
  io::write_pfm(pair_path(dir, p.view_n, p.view_m, "cm"), p.confidence_m);
}

inline PairPrediction read_pair(const fs::path& dir, int n, int m) {
  PairPrediction p;
  p.view_n = n;
  p.view_m = m;
  ScalarMap ch[3];
  for (int c = 0; c < 3; ++c) ch[c] = io::read_pfm_scalar(pair_path(dir, n, m, pair_channels()[static_cast<std::size_t>(c)]));
  p.confidence_n = io::read_pfm_scalar(pair_path(dir, n, m, "cn"));
  p.confidence_m = io::read_pfm_scalar(pair_path(dir, n, m, "cm"));
  const int w = p.confidence_n.width(), h = p.confidence_n.height();
  std::vector<std::string> bad;
  for (int c = 0; c < 3; ++c) {
    if (!ch[c].same_shape(2 * w, h)) bad.push_back(pair_path(dir, n, m, pair_channels()[static_cast<std::size_t>(c)]).string());
  }
  if (!p.confidence_m.same_shape(w, h)) bad.push_back(pair_path(dir, n, m, "cm").string());
  if (!bad.empty()) throw ValidationError("pair " + std::to_string(n) + "_" + std::to_string(m) + ": channel sizes disagree", bad);
  p.pointmap_n = PointMap(w, h);
  p.pointmap_m = PointMap(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      p.pointmap_n(x, y) = Vec3(ch[0](x, y), ch[1](x, y), ch[2](x, y));
      p.pointmap_m(x, y) = Vec3(ch[0](w + x, y), ch[1](w + x, y), ch[2](w + x, y));
    }
  }
  return p;
}

struct IngestOptions {
  int n_views = 0;        // 0 reads it from config.json
  bool require_gt = false;
  int max_long_side = 512;
};

inline SceneBundle ingest(const fs::path& dir, const IngestOptions& opt = {}) {
  SceneBundle b;
  int n = opt.n_views;
  int n_test = 0;
  if (fs::exists(dir / "config.json")) {
    const json cfg = read_json(dir / "config.json");
    if (n == 0) n = cfg.value("n_views", 0);
    n_test = cfg.value("n_test", 0);
  }
  if (n == 0) {
    while (fs::exists(image_path(dir, n))) ++n;
  }
  if (n < 2) throw ValidationError("ingest: need at least two training views in " + (dir / "images").string());

  std::vector<std::string> missing;
  auto check = [&](const fs::path& p, const std::string& hint) {
    if (!fs::exists(p)) missing.push_back(p.string() + " (" + hint + ")");
  };
  const std::string pair_hint = "produce it with `d2t synth` or the pointmap-model adapter";
  const std::string mono_hint = "produce it with `d2t synth` or the mono-depth adapter";
  for (int k = 0; k < n; ++k) {
    check(image_path(dir, k), "training image");
    check(mono_path(dir, k), mono_hint);
  }
  std::vector<std::pair<int, int>> pairs;
  for (int a = 0; a < n; ++a) {
    for (int c = a + 1; c < n; ++c) {
      if (fs::exists(pair_path(dir, a, c, "x"))) {
        pairs.emplace_back(a, c);
      } else if (fs::exists(pair_path(dir, c, a, "x"))) {
        pairs.emplace_back(c, a);
      } else {
        pairs.emplace_back(a, c);
      }
      for (const auto& ch : pair_channels()) check(pair_path(dir, pairs.back().first, pairs.back().second, ch), pair_hint);
    }
  }
  for (int k = 0; k < n_test; ++k) check(test_image_path(dir, k), "held-out image listed in config.json");
  if (opt.require_gt) check(dir / "gt" / "poses.json", "ground-truth poses");
  if (!missing.empty()) {
    throw ValidationError("ingest: " + std::to_string(missing.size()) + " required file(s) missing", missing);
  }

  for (int k = 0; k < n; ++k) b.images.push_back(io::read_image(image_path(dir, k)));
  for (int k = 0; k < n_test; ++k) b.test_images.push_back(io::read_image(test_image_path(dir, k)));
  for (int k = 0; k < n; ++k) b.mono.push_back(io::read_pfm_scalar(mono_path(dir, k)));
  b.graph.n_views = n;
  for (const auto& [a, c] : pairs) b.graph.edges.push_back(read_pair(dir, a, c));

  std::vector<std::string> bad;
  const int w = b.images.front().width(), h = b.images.front().height();
  for (int k = 0; k < n; ++k) {
    if (!b.images[static_cast<std::size_t>(k)].same_shape(w, h)) bad.push_back(image_path(dir, k).string());
    if (!b.mono[static_cast<std::size_t>(k)].same_shape(w, h)) bad.push_back(mono_path(dir, k).string());
  }
  for (int k = 0; k < n_test; ++k) {
    if (!b.test_images[static_cast<std::size_t>(k)].same_shape(w, h)) bad.push_back(test_image_path(dir, k).string());
  }
  const auto& e0 = b.graph.edges.front();
  for (const auto& e : b.graph.edges) {
    if (!e.pointmap_n.same_shape(e0.pointmap_n)) bad.push_back(pair_path(dir, e.view_n, e.view_m, "x").string());
  }
  if (!bad.empty()) throw ValidationError("ingest: inconsistent resolutions", bad);
  b.graph.validate();

  if (std::max(e0.width(), e0.height()) > opt.max_long_side) {
    b.warnings.push_back("pointmap long side exceeds " + std::to_string(opt.max_long_side) + " pixels");
  }
  if (fs::exists(dir / "gt" / "poses.json")) {
    b.gt = ground_truth_from_json(read_json(dir / "gt" / "poses.json"));
    if (static_cast<int>(b.gt->views.size()) != n) {
      throw ValidationError("ingest: gt/poses.json lists " + std::to_string(b.gt->views.size()) + " views, expected " +
                            std::to_string(n));
    }
  }
  return b;
}

}  // namespace d2t
