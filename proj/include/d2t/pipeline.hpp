#pragma once

// End-to-end orchestration over a scene directory and a run directory.
//
// Stages run in order and each one reads only what earlier stages persisted:
//   ccm     focal, global alignment, initial cloud    -> ccm/
//   coarse  joint optimization on training views      -> coarse/
//   cada    per-view depth alignment                  -> cada/
//   wigi    novel poses, warp, clean, inpaint          -> wigi/
//   fine    joint optimization with synthesized views -> fine/, model.bin, poses_refined.json, trace.jsonl
//   eval    test-view localization and metrics        -> renders/, metrics.json
// A stage directory holding a `done` marker is complete.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "d2t/coarse_init.hpp"
#include "d2t/core_geometry.hpp"
#include "d2t/depth_align.hpp"
#include "d2t/errors.hpp"
#include "d2t/eval.hpp"
#include "d2t/image_io.hpp"
#include "d2t/optimizer.hpp"
#include "d2t/scene_io.hpp"
#include "d2t/splat_renderer.hpp"
#include "d2t/view_synthesis.hpp"

namespace d2t {

struct PipelineConfig {
  fs::path scene_dir;
  fs::path run_dir;
  int n_views = 0;  // 0: read from the scene
  int k_p = 0;      // 0: chosen from the view count
  double p = 0.3;
  int window = 5;
  LossWeights weights;
  Schedule schedule;
  std::uint64_t seed = 0;
  std::string inpainter = "builtin";  // or "external"
  std::string inpainter_command;
  std::size_t max_points = 5000;
  int align_iterations = 300;
  double init_noise_rotation_deg = 0.0;
  double init_noise_translation = 0.0;  // fraction of the point-cloud bounding-box diagonal
  int localize_steps = 200;
  double localize_lr = 1e-2;
  double localize_lr_final = 1e-3;
  bool normalize_depth = true;
  bool quiet = false;

  int resolved_k_p(int views) const {
    if (k_p > 0) return k_p;
    if (views <= 3) return 18;
    if (views <= 6) return 6;
    return 4;
  }

  void validate() const {
    if (n_views < 0 || n_views == 1) throw ValidationError("config: n_views must be 0 (auto) or at least 2");
    if (k_p < 0) throw ValidationError("config: K_p must be 0 (auto) or positive");
    if (!(p > 0.0 && p <= 1.0)) throw ValidationError("config: P must lie in (0, 1]");
    if (window < 1 || window % 2 == 0) throw ValidationError("config: w must be a positive odd integer");
    weights.validate();
    schedule.validate();
    if (inpainter != "builtin" && inpainter != "external") {
      throw ValidationError("config: inpainter must be \"builtin\" or \"external\"");
    }
    if (inpainter == "external" && inpainter_command.empty()) {
      throw ValidationError("config: external inpainter needs inpainter_command");
    }
    if (align_iterations < 0 || localize_steps < 0) throw ValidationError("config: iteration counts must be non-negative");
    if (init_noise_rotation_deg < 0.0 || init_noise_translation < 0.0) {
      throw ValidationError("config: noise levels must be non-negative");
    }
  }
};

inline json config_to_json(const PipelineConfig& c) {
  const auto& lr = c.schedule.lr;
  return json{
      {"scene_dir", c.scene_dir.string()},
      {"run_dir", c.run_dir.string()},
      {"n_views", c.n_views},
      {"k_p", c.k_p},
      {"p", c.p},
      {"w", c.window},
      {"weights", {{"lambda", c.weights.lambda}, {"lambda_depth", c.weights.lambda_depth}, {"lambda_pseudo", c.weights.lambda_pseudo}}},
      {"schedule",
       {{"coarse_steps", c.schedule.coarse_steps},
        {"fine_steps", c.schedule.fine_steps},
        {"optimize_fine_poses", c.schedule.optimize_fine_poses},
        {"lr",
         {{"position", lr.position},
          {"position_final", lr.position_final},
          {"color", lr.color},
          {"opacity", lr.opacity},
          {"scale", lr.scale},
          {"rotation", lr.rotation},
          {"pose", lr.pose},
          {"pose_final", lr.pose_final}}}}},
      {"seed", c.seed},
      {"inpainter", c.inpainter},
      {"inpainter_command", c.inpainter_command},
      {"max_points", c.max_points},
      {"align_iterations", c.align_iterations},
      {"init_noise_rotation_deg", c.init_noise_rotation_deg},
      {"init_noise_translation", c.init_noise_translation},
      {"localize_steps", c.localize_steps},
      {"localize_lr", c.localize_lr},
      {"localize_lr_final", c.localize_lr_final},
      {"normalize_depth", c.normalize_depth},
  };
}

namespace detail {

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
  std::vector<std::string> bad;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) bad.push_back(where + it.key());
  }
  if (!bad.empty()) throw ValidationError("config: unknown field(s)", bad);
}

}  // namespace detail

// Missing fields take their defaults; unknown fields are rejected.
inline PipelineConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("config: expected a JSON object");
  PipelineConfig c;
  detail::reject_unknown(j,
                         {"scene_dir", "run_dir", "n_views", "k_p", "p", "w", "weights", "schedule", "seed", "inpainter",
                          "inpainter_command", "max_points", "align_iterations", "init_noise_rotation_deg",
                          "init_noise_translation", "localize_steps", "localize_lr", "localize_lr_final",
                          "normalize_depth"},
                         "");
  try {
    if (j.contains("scene_dir")) c.scene_dir = j.at("scene_dir").get<std::string>();
    if (j.contains("run_dir")) c.run_dir = j.at("run_dir").get<std::string>();
    detail::read_field(j, "n_views", c.n_views);
    detail::read_field(j, "k_p", c.k_p);
    detail::read_field(j, "p", c.p);
    detail::read_field(j, "w", c.window);
    if (j.contains("weights")) {
      const auto& w = j.at("weights");
      detail::reject_unknown(w, {"lambda", "lambda_depth", "lambda_pseudo"}, "weights.");
      detail::read_field(w, "lambda", c.weights.lambda);
      detail::read_field(w, "lambda_depth", c.weights.lambda_depth);
      detail::read_field(w, "lambda_pseudo", c.weights.lambda_pseudo);
    }
    if (j.contains("schedule")) {
      const auto& s2 = j.at("schedule");
      detail::reject_unknown(s2, {"coarse_steps", "fine_steps", "optimize_fine_poses", "lr"}, "schedule.");
      detail::read_field(s2, "coarse_steps", c.schedule.coarse_steps);
      detail::read_field(s2, "fine_steps", c.schedule.fine_steps);
      detail::read_field(s2, "optimize_fine_poses", c.schedule.optimize_fine_poses);
      if (s2.contains("lr")) {
        const auto& lr = s2.at("lr");
        detail::reject_unknown(lr, {"position", "position_final", "color", "opacity", "scale", "rotation", "pose", "pose_final"},
                               "schedule.lr.");
        auto& L = c.schedule.lr;
        detail::read_field(lr, "position", L.position);
        detail::read_field(lr, "position_final", L.position_final);
        detail::read_field(lr, "color", L.color);
        detail::read_field(lr, "opacity", L.opacity);
        detail::read_field(lr, "scale", L.scale);
        detail::read_field(lr, "rotation", L.rotation);
        detail::read_field(lr, "pose", L.pose);
        detail::read_field(lr, "pose_final", L.pose_final);
      }
    }
    detail::read_field(j, "seed", c.seed);
    detail::read_field(j, "inpainter", c.inpainter);
    detail::read_field(j, "inpainter_command", c.inpainter_command);
    detail::read_field(j, "max_points", c.max_points);
    detail::read_field(j, "align_iterations", c.align_iterations);
    detail::read_field(j, "init_noise_rotation_deg", c.init_noise_rotation_deg);
    detail::read_field(j, "init_noise_translation", c.init_noise_translation);
    detail::read_field(j, "localize_steps", c.localize_steps);
    detail::read_field(j, "localize_lr", c.localize_lr);
    detail::read_field(j, "localize_lr_final", c.localize_lr_final);
    detail::read_field(j, "normalize_depth", c.normalize_depth);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> s{"ccm", "coarse", "cada", "wigi", "fine", "eval"};
  return s;
}

inline int stage_index(const std::string& name) {
  const auto& s = stage_names();
  const auto it = std::find(s.begin(), s.end(), name);
  if (it == s.end()) throw ValidationError("unknown stage '" + name + "'");
  return static_cast<int>(it - s.begin());
}

class StageError : public Error {
 public:
  StageError(std::string stage, std::string type, const std::string& what, std::vector<std::string> details = {})
      : Error(what), stage_(std::move(stage)), type_(std::move(type)), details_(std::move(details)) {}
  const std::string& stage() const { return stage_; }
  const std::string& type() const { return type_; }
  const std::vector<std::string>& details() const { return details_; }

 private:
  std::string stage_, type_;
  std::vector<std::string> details_;
};

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const PipelineConfig& config() const { return cfg_; }
  fs::path stage_dir(const std::string& s) const { return cfg_.run_dir / s; }
  bool stage_done(const std::string& s) const { return fs::exists(stage_dir(s) / "done"); }

  // Runs stages [first, last]. Earlier stages must already be complete.
  void run(const std::string& first = "ccm", const std::string& last = "eval") {
    const int a = stage_index(first), b = stage_index(last);
    fs::create_directories(cfg_.run_dir);
    fs::remove(cfg_.run_dir / "failure.json");
    for (int k = 0; k < a; ++k) {
      if (!stage_done(stage_names()[static_cast<std::size_t>(k)])) {
        fail(stage_names()[static_cast<std::size_t>(a)], "MissingStage",
             "stage '" + stage_names()[static_cast<std::size_t>(k)] + "' has not completed in " + cfg_.run_dir.string());
      }
    }
    write_json(cfg_.run_dir / "config.json", config_to_json(cfg_));
    json runtime = json::object();
    if (fs::exists(cfg_.run_dir / "runtime.json")) runtime = read_json(cfg_.run_dir / "runtime.json");
    for (int k = a; k <= b; ++k) {
      const std::string& name = stage_names()[static_cast<std::size_t>(k)];
      fs::remove(stage_dir(name) / "done");
      log("stage " + name);
      const auto t0 = std::chrono::steady_clock::now();
      try {
        run_stage(name);
      } catch (const StageError&) {
        throw;
      } catch (const ValidationError& e) {
        fail(name, "ValidationError", e.what(), e.offenders());
      } catch (const ParseError& e) {
        fail(name, "ParseError", e.what(), {e.file() + " @ byte " + std::to_string(e.byte_offset())});
      } catch (const OptimizationFailure& e) {
        fail(name, "OptimizationFailure", e.what(), {"trace length " + std::to_string(e.trace().size())});
      } catch (const Error& e) {
        fail(name, "Error", e.what());
      } catch (const std::exception& e) {
        fail(name, "InternalError", e.what());
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      runtime[name] = secs;
      write_json(cfg_.run_dir / "runtime.json", runtime);
      io::write_atomic(stage_dir(name) / "done", name + "\n");
    }
  }

  // The first stage without a completion marker.
  std::string first_incomplete() const {
    for (const auto& s : stage_names())
      if (!stage_done(s)) return s;
    return "";
  }

 private:
  void log(const std::string& msg) const {
    if (!cfg_.quiet) std::cerr << "[d2t] " << msg << "\n";
  }

  [[noreturn]] void fail(const std::string& stage, const std::string& type, const std::string& what,
                         const std::vector<std::string>& details = {}) const {
    json f{{"stage", stage}, {"type", type}, {"message", what}, {"details", details}};
    try {
      write_json(cfg_.run_dir / "failure.json", f);
    } catch (...) {
    }
    throw StageError(stage, type, what, details);
  }

  void run_stage(const std::string& name) {
    if (name == "ccm") return stage_ccm();
    if (name == "coarse") return stage_coarse();
    if (name == "cada") return stage_cada();
    if (name == "wigi") return stage_wigi();
    if (name == "fine") return stage_fine();
    return stage_eval();
  }

  SceneBundle load_scene() const {
    IngestOptions opt;
    opt.n_views = cfg_.n_views;
    return ingest(cfg_.scene_dir, opt);
  }

  struct Cameras {
    CameraIntrinsics pointmap;
    CameraIntrinsics image;
  };

  Cameras load_cameras() const {
    const json j = read_json(stage_dir("ccm") / "intrinsics.json");
    Cameras c;
    c.pointmap = CameraIntrinsics(j.at("focal_pointmap").get<double>(), j.at("pointmap_width").get<int>(),
                                  j.at("pointmap_height").get<int>());
    c.image = CameraIntrinsics(j.at("focal_image").get<double>(), j.at("image_width").get<int>(),
                               j.at("image_height").get<int>());
    return c;
  }

  RenderConfig render_config() const {
    RenderConfig r;
    r.normalize_depth = cfg_.normalize_depth;
    return r;
  }

  StageConfig stage_config(const CameraIntrinsics& intr) const {
    StageConfig s;
    s.weights = cfg_.weights;
    s.schedule = cfg_.schedule;
    s.render = render_config();
    s.intrinsics = intr;
    return s;
  }

  static fs::path indexed(const fs::path& dir, const std::string& stem, std::size_t k, const std::string& ext) {
    return dir / (stem + "_" + std::to_string(k) + ext);
  }

  TrainerState load_checkpoint(const std::string& stage) const {
    const fs::path p = stage_dir(stage) / "checkpoint.bin";
    return decode_checkpoint(io::read_file(p), p.string());
  }

  void stage_ccm() {
    const SceneBundle b = load_scene();
    for (const auto& w : b.warnings) log("warning: " + w);
    const auto& g = b.graph;
    std::vector<double> focals;
    for (const auto& e : g.edges) focals.push_back(estimate_focal(e));
    const double f = average_focal(focals);
    const int wp = g.edges.front().width(), hp = g.edges.front().height();
    const CameraIntrinsics pm(f, wp, hp);
    const int wi = b.images.front().width(), hi = b.images.front().height();
    const CameraIntrinsics img = pm.resized(wi, hi);

    AlignConfig ac;
    ac.iterations = cfg_.align_iterations;
    const GlobalAlignmentState st = align_global(g, pm, ac);

    std::vector<Vec3> points, colors;
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi3 = -lo;
    for (int v = 0; v < g.n_views; ++v) {
      const auto& im = b.images[static_cast<std::size_t>(v)];
      for (int y = 0; y < hp; ++y) {
        for (int x = 0; x < wp; ++x) {
          const Vec3 p = st.world_point(v, x, y);
          if (!p.allFinite()) continue;
          points.push_back(p);
          lo = lo.cwiseMin(p);
          hi3 = hi3.cwiseMax(p);
          const double sx = static_cast<double>(x) * wi / wp, sy = static_cast<double>(y) * hi / hp;
          Vec3 c;
          for (int ch = 0; ch < 3; ++ch) {
            c[ch] = sample_channel(im, ch, sx, sy);
          }
          colors.push_back(c);
        }
      }
    }
    InitConfig ic;
    ic.max_points = cfg_.max_points;
    TrainerState s;
    s.cloud = init_from_points(points, colors, ic);
    s.poses = st.view_poses;
    const std::vector<Pose> clean = s.poses;
    const double diameter = (hi3 - lo).norm();
    if (cfg_.init_noise_rotation_deg > 0.0 || cfg_.init_noise_translation > 0.0) {
      std::mt19937_64 rng(cfg_.seed);
      std::normal_distribution<double> nd(0.0, 1.0);
      for (auto& p : s.poses) {
        Vec3 axis(nd(rng), nd(rng), nd(rng));
        Vec3 dir(nd(rng), nd(rng), nd(rng));
        axis.normalize();
        dir.normalize();
        const Mat3 r = so3_exp(axis * cfg_.init_noise_rotation_deg * M_PI / 180.0) * p.rotation;
        const Vec3 c = p.center() + cfg_.init_noise_translation * diameter * dir;
        p = Pose(r, -r * c);
      }
    }
    s.scene_extent = camera_extent(s.poses);

    const fs::path d = stage_dir("ccm");
    io::write_atomic(d / "checkpoint.bin", encode_checkpoint(s));
    write_model(d / "model.bin", s.cloud);
    write_json(d / "poses.json", poses_to_json(s.poses));
    write_json(d / "poses_clean.json", poses_to_json(clean));
    write_json(d / "intrinsics.json", json{{"focal_pointmap", f},
                                           {"pointmap_width", wp},
                                           {"pointmap_height", hp},
                                           {"focal_image", img.focal},
                                           {"image_width", wi},
                                           {"image_height", hi},
                                           {"edge_focals", focals}});
    write_json(d / "alignment.json", json{{"objective", st.trace.objective.back()},
                                          {"objective_initial", st.trace.objective.front()},
                                          {"iterations", st.trace.iterations_run},
                                          {"scale_product", st.scale_product()},
                                          {"points", points.size()},
                                          {"gaussians", s.cloud.size()},
                                          {"scene_diameter", diameter}});
    for (int v = 0; v < g.n_views; ++v) {
      io::write_pfm(indexed(d, "depth", static_cast<std::size_t>(v), ".pfm"), st.depths[static_cast<std::size_t>(v)]);
      std::vector<ScalarMap> maps;
      for (const auto& e : g.edges) {
        if (e.view_n == v) maps.push_back(e.confidence_n);
        if (e.view_m == v) maps.push_back(e.confidence_m);
      }
      io::write_pfm(indexed(d, "confidence", static_cast<std::size_t>(v), ".pfm"), build_confidence(maps));
    }
  }

  static double sample_channel(const ColorImage& im, int ch, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(im.width() - 1));
    y = std::clamp(y, 0.0, static_cast<double>(im.height() - 1));
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, im.width() - 1), y1 = std::min(y0 + 1, im.height() - 1);
    const double fx = x - x0, fy = y - y0;
    return (1 - fy) * ((1 - fx) * im(x0, y0)[ch] + fx * im(x1, y0)[ch]) + fy * ((1 - fx) * im(x0, y1)[ch] + fx * im(x1, y1)[ch]);
  }

  std::vector<TrainingView> training_views(const SceneBundle& b) const {
    std::vector<TrainingView> v;
    for (std::size_t k = 0; k < b.images.size(); ++k) v.push_back({b.images[k], b.mono[k]});
    return v;
  }

  void stage_coarse() {
    const SceneBundle b = load_scene();
    const Cameras cams = load_cameras();
    TrainerState s = load_checkpoint("ccm");
    StageConfig sc = stage_config(cams.image);
    coarse_stage(s, training_views(b), sc);
    const fs::path d = stage_dir("coarse");
    io::write_atomic(d / "checkpoint.bin", encode_checkpoint(s));
    write_model(d / "model.bin", s.cloud);
    write_json(d / "poses.json", poses_to_json(s.poses));
    io::write_atomic(d / "trace.jsonl", encode_trace(s.trace));
  }

  void stage_cada() {
    const SceneBundle b = load_scene();
    const fs::path src = stage_dir("ccm"), d = stage_dir("cada");
    json fits = json::array();
    for (std::size_t v = 0; v < b.images.size(); ++v) {
      const ScalarMap coarse = io::read_pfm_scalar(indexed(src, "depth", v, ".pfm"));
      const ScalarMap conf = io::read_pfm_scalar(indexed(src, "confidence", v, ".pfm"));
      const ScalarMap& mono = b.mono[v];
      ScalarMap depth;
      json entry{{"view", v}};
      try {
        const auto r = align_view_depth(coarse, {conf}, mono, cfg_.p);
        depth = r.aligned_depth;
        entry["scale"] = r.fit.scale;
        entry["shift"] = r.fit.shift;
        entry["masked_pixels"] = count_true(r.fit.mask);
      } catch (const Error& e) {
        // Fall back to the upsampled coarse depth for this view.
        depth = upsample_bilinear(coarse, mono.width(), mono.height());
        entry["fallback"] = e.what();
        log(std::string("warning: view ") + std::to_string(v) + " depth alignment failed: " + e.what());
      }
      io::write_pfm(indexed(d, "depth", v, ".pfm"), depth);
      fits.push_back(entry);
    }
    write_json(d / "fits.json", fits);
  }

  std::unique_ptr<Inpainter> make_inpainter() const {
    if (cfg_.inpainter == "external") return std::make_unique<ExternalProcessInpainter>(cfg_.inpainter_command);
    return std::make_unique<DiffusionInpainter>();
  }

  void stage_wigi() {
    const SceneBundle b = load_scene();
    const Cameras cams = load_cameras();
    const std::vector<Pose> poses = poses_from_json(read_json(stage_dir("coarse") / "poses.json"));
    std::vector<ScalarMap> depths;
    for (std::size_t v = 0; v < b.images.size(); ++v) {
      depths.push_back(io::read_pfm_scalar(indexed(stage_dir("cada"), "depth", v, ".pfm")));
    }
    const NovelPoseSet novel = sample_novel_poses(poses, cfg_.resolved_k_p(b.n_views()));
    const auto inpainter = make_inpainter();
    const SynthesisOutput out = synthesize(b.images, depths, poses, novel, cams.image, *inpainter, cfg_.window);
    const fs::path d = stage_dir("wigi");
    json kept = json::array();
    for (std::size_t k = 0; k < out.results.size(); ++k) {
      const auto& r = out.results[k];
      const std::size_t idx = out.pose_index[k];
      io::write_png(indexed(d, "novel", idx, ".png"), *r.inpainted);
      io::write_png(indexed(d, "warped", idx, ".png"), r.warped);
      io::write_png(indexed(d, "mask", idx, ".png"), r.cleaned_mask);
      kept.push_back(idx);
    }
    json warnings = json::array();
    for (const auto& w : out.warnings) {
      warnings.push_back({{"pose", w.pose_index}, {"message", w.message}});
      log("warning: novel pose " + std::to_string(w.pose_index) + ": " + w.message);
    }
    write_json(d / "novel.json", json{{"poses", poses_to_json(novel.poses)},
                                      {"source_view", novel.source_view},
                                      {"spline_parameter", novel.spline_parameter},
                                      {"kept", kept},
                                      {"warnings", warnings},
                                      {"inpainter", inpainter->name()}});
    if (out.results.empty()) throw Error("wigi: every novel pose failed");
  }

  void stage_fine() {
    const SceneBundle b = load_scene();
    const Cameras cams = load_cameras();
    TrainerState s = load_checkpoint("coarse");
    const json nj = read_json(stage_dir("wigi") / "novel.json");
    const std::vector<Pose> novel = poses_from_json(nj.at("poses"));
    std::vector<PseudoView> pseudo;
    for (const auto& idx : nj.at("kept")) {
      const auto k = idx.get<std::size_t>();
      pseudo.push_back({io::read_image(indexed(stage_dir("wigi"), "novel", k, ".png")), novel.at(k)});
    }
    StageConfig sc = stage_config(cams.image);
    s.trace = decode_trace(io::read_file(stage_dir("coarse") / "trace.jsonl"), "coarse/trace.jsonl");
    const std::size_t before = s.trace.size();
    fine_stage(s, training_views(b), pseudo, sc);
    const fs::path d = stage_dir("fine");
    io::write_atomic(d / "checkpoint.bin", encode_checkpoint(s));
    io::write_atomic(d / "trace.jsonl",
                     encode_trace(std::vector<TraceRecord>(s.trace.begin() + static_cast<std::ptrdiff_t>(before), s.trace.end())));
    write_model(cfg_.run_dir / "model.bin", s.cloud);
    write_json(cfg_.run_dir / "poses_refined.json", poses_to_json(s.poses));
    io::write_atomic(cfg_.run_dir / "trace.jsonl", encode_trace(s.trace));
  }

  struct ViewEval {
    double psnr = 0.0;
    double ssim = 0.0;
    double loss = 0.0;
    Pose pose;
    ColorImage render;
  };

  ViewEval evaluate_test_view(const TrainerState& s, const ColorImage& image, const Pose& init,
                              const CameraIntrinsics& intr) const {
    LocalizeConfig lc;
    lc.steps = cfg_.localize_steps;
    lc.lr = cfg_.localize_lr;
    lc.lr_final = cfg_.localize_lr_final;
    lc.lambda = cfg_.weights.lambda;
    lc.translation_scale = s.scene_extent;
    lc.render = render_config();
    const LocalizeResult lr = localize_test_view(s.cloud, image, init, intr, lc);
    ViewEval e;
    e.pose = lr.pose;
    e.loss = lr.loss;
    e.render = render(s.cloud, lr.pose, intr, lc.render).color;
    e.psnr = psnr(e.render, image);
    e.ssim = ssim(e.render, image);
    return e;
  }

  static json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

  void stage_eval() {
    const SceneBundle b = load_scene();
    const Cameras cams = load_cameras();
    const TrainerState coarse = load_checkpoint("coarse");
    const TrainerState fine = load_checkpoint("fine");
    const fs::path rd = cfg_.run_dir / "renders";
    json m = json::object();
    m["n_views"] = b.n_views();
    m["n_gaussians"] = fine.cloud.size();
    m["focal_image"] = cams.image.focal;

    for (std::size_t v = 0; v < fine.poses.size(); ++v) {
      const ColorImage r = render(fine.cloud, fine.poses[v], cams.image, render_config()).color;
      io::write_png(indexed(rd, "view", v, ".png"), r);
    }
    json train = json::array();
    for (std::size_t v = 0; v < fine.poses.size(); ++v) {
      const ColorImage r = render(fine.cloud, fine.poses[v], cams.image, render_config()).color;
      train.push_back({{"view", v}, {"psnr", finite_or_null(psnr(r, b.images[v]))}});
    }
    m["train_views"] = train;

    if (b.gt) {
      const auto& gt = *b.gt;
      const Trajectory gt_traj = to_camera_to_world(gt.views);
      auto pm = [&](const std::vector<Pose>& est) {
        const PoseMetrics p = pose_metrics(to_camera_to_world(est), gt_traj);
        return json{{"ate_rmse", p.ate_rmse}, {"rpe_trans_x100", p.rpe_trans}, {"rpe_rot_deg", p.rpe_rot}};
      };
      m["pose"] = pm(fine.poses);
      m["pose_coarse"] = pm(coarse.poses);
      m["pose_initial"] = pm(poses_from_json(read_json(stage_dir("ccm") / "poses.json")));
      m["pose_alignment"] = pm(poses_from_json(read_json(stage_dir("ccm") / "poses_clean.json")));
      m["ate_definition"] = "rmse";

      if (!b.test_images.empty()) {
        if (gt.tests.size() != b.test_images.size()) throw ValidationError("eval: gt/poses.json test count mismatch");
        json tests = json::array();
        double sums[4] = {0, 0, 0, 0};
        for (std::size_t t = 0; t < b.test_images.size(); ++t) {
          // Initialize from the training view whose ground-truth center is nearest.
          const int near = nearest_view(gt.views, gt.tests[t].center());
          const auto ec = evaluate_test_view(coarse, b.test_images[t], coarse.poses[static_cast<std::size_t>(near)], cams.image);
          const auto ef = evaluate_test_view(fine, b.test_images[t], fine.poses[static_cast<std::size_t>(near)], cams.image);
          io::write_png(indexed(rd, "test", t, ".png"), ef.render);
          io::write_png(indexed(rd, "test_coarse", t, ".png"), ec.render);
          tests.push_back({{"test", t},
                           {"init_view", near},
                           {"psnr_coarse", finite_or_null(ec.psnr)},
                           {"ssim_coarse", ec.ssim},
                           {"psnr", finite_or_null(ef.psnr)},
                           {"ssim", ef.ssim},
                           {"pose", pose_to_json(ef.pose)}});
          sums[0] += ec.psnr;
          sums[1] += ec.ssim;
          sums[2] += ef.psnr;
          sums[3] += ef.ssim;
        }
        const double n = static_cast<double>(b.test_images.size());
        m["test_views"] = tests;
        m["psnr_coarse"] = finite_or_null(sums[0] / n);
        m["ssim_coarse"] = sums[1] / n;
        m["psnr"] = finite_or_null(sums[2] / n);
        m["ssim"] = sums[3] / n;
      }
    }

    const auto trace = decode_trace(io::read_file(cfg_.run_dir / "trace.jsonl"), "trace.jsonl");
    const auto win = windowed_loss(trace, 100);
    bool monotone = true;
    for (std::size_t k = 1; k < win.size(); ++k) monotone = monotone && win[k] <= win[k - 1];
    m["windowed_train_loss"] = win;
    m["windowed_train_loss_non_increasing"] = monotone;
    write_json(cfg_.run_dir / "metrics.json", m);
  }

  PipelineConfig cfg_;
};

}  // namespace d2t
