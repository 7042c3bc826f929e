#pragma once

// Novel-view supervision: sample poses along a B-spline through the training
// cameras, forward-warp the nearest training image through its aligned depth,
// drop isolated splats from the warp mask and fill the holes.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include "d2t/core_geometry.hpp"
#include "d2t/errors.hpp"
#include "d2t/image_io.hpp"

namespace d2t {

struct NovelPoseSet {
  std::vector<Pose> poses;
  std::vector<int> source_view;
  std::vector<double> spline_parameter;
};

// Clamped uniform B-spline of the given degree, evaluated with de Boor's
// recursion. t in [0, 1].
inline Vec3 bspline_point(const std::vector<Vec3>& control, int degree, double t) {
  const int n = static_cast<int>(control.size());
  const int p = std::min(degree, n - 1);
  std::vector<double> knots;
  knots.reserve(static_cast<std::size_t>(n + p + 1));
  for (int i = 0; i <= p; ++i) knots.push_back(0.0);
  const int interior = n - p - 1;
  for (int i = 1; i <= interior; ++i) knots.push_back(static_cast<double>(i) / (interior + 1));
  for (int i = 0; i <= p; ++i) knots.push_back(1.0);

  t = std::clamp(t, 0.0, 1.0);
  int k = p;
  while (k < n - 1 && t >= knots[static_cast<std::size_t>(k + 1)]) ++k;
  std::vector<Vec3> d(static_cast<std::size_t>(p + 1));
  for (int j = 0; j <= p; ++j) d[static_cast<std::size_t>(j)] = control[static_cast<std::size_t>(j + k - p)];
  for (int r = 1; r <= p; ++r) {
    for (int j = p; j >= r; --j) {
      const double lo = knots[static_cast<std::size_t>(j + k - p)];
      const double hi = knots[static_cast<std::size_t>(j + 1 + k - r)];
      const double alpha = hi > lo ? (t - lo) / (hi - lo) : 0.0;
      d[static_cast<std::size_t>(j)] =
          (1.0 - alpha) * d[static_cast<std::size_t>(j - 1)] + alpha * d[static_cast<std::size_t>(j)];
    }
  }
  return d[static_cast<std::size_t>(p)];
}

inline int nearest_view(const std::vector<Pose>& poses, const Vec3& center) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const double d = (poses[i].center() - center).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// K_p poses per consecutive training pair: centers from a cubic clamped
// B-spline over the ordered training centers, rotations slerped between the
// bracketing training cameras.
inline NovelPoseSet sample_novel_poses(const std::vector<Pose>& training, int k_p) {
  if (training.size() < 2) throw ValidationError("sample_novel_poses: need at least two poses");
  if (k_p < 1) throw ValidationError("sample_novel_poses: K_p must be positive");
  std::vector<Vec3> centers;
  for (const auto& p : training) centers.push_back(p.center());
  const int segments = static_cast<int>(training.size()) - 1;

  NovelPoseSet out;
  for (int s = 0; s < segments; ++s) {
    const Eigen::Quaterniond qa(Mat3(training[static_cast<std::size_t>(s)].rotation.transpose()));
    const Eigen::Quaterniond qb(Mat3(training[static_cast<std::size_t>(s + 1)].rotation.transpose()));
    for (int j = 0; j < k_p; ++j) {
      const double local = static_cast<double>(j + 1) / (k_p + 1);
      const double t = (s + local) / segments;
      const Vec3 c = bspline_point(centers, 3, t);
      const Mat3 cam_to_world = qa.slerp(local, qb).normalized().toRotationMatrix();
      Pose pose = Pose::from_camera_center(cam_to_world, c);
      pose.enforce_rotation();
      out.poses.push_back(pose);
      out.source_view.push_back(nearest_view(training, c));
      out.spline_parameter.push_back(t);
    }
  }
  return out;
}

struct WarpResult {
  ColorImage warped;
  BinaryMask raw_mask;      // true where at least one source pixel landed
  BinaryMask cleaned_mask;  // subset of raw_mask
  std::optional<ColorImage> inpainted;
  ScalarMap zbuffer;        // +inf where nothing landed
  std::size_t skipped_pixels = 0;
};

// Forward splat of every source pixel to the nearest destination pixel with a
// nearest-depth Z-buffer. Poses are world-to-camera, so the source-to-target
// transform is dst * src^{-1}.
inline WarpResult warp(const ColorImage& source, const ScalarMap& depth, const Pose& src_pose,
                       const Pose& dst_pose, const CameraIntrinsics& intr) {
  if (!source.same_shape(depth) || !source.same_shape(intr.width, intr.height)) {
    throw ValidationError("warp: image, depth and intrinsics must share a resolution");
  }
  const int w = source.width(), h = source.height();
  WarpResult r;
  r.warped = ColorImage(w, h);
  r.raw_mask = BinaryMask(w, h, 0);
  r.zbuffer = ScalarMap(w, h, std::numeric_limits<double>::infinity());
  const Pose rel = dst_pose * src_pose.inverse();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double d = depth(x, y);
      if (!(d > 0.0) || !std::isfinite(d)) {
        ++r.skipped_pixels;
        continue;
      }
      const auto proj = project(rel.apply(unproject(Vec2(x, y), d, intr)), intr);
      if (!proj) continue;
      const double fx = std::floor(proj->pixel.x() + 0.5);
      const double fy = std::floor(proj->pixel.y() + 0.5);
      if (!(fx >= 0.0 && fy >= 0.0 && fx < w && fy < h)) continue;
      const int px = static_cast<int>(fx), py = static_cast<int>(fy);
      if (proj->depth < r.zbuffer(px, py)) {
        r.zbuffer(px, py) = proj->depth;
        r.warped(px, py) = source(x, y);
        r.raw_mask(px, py) = 1;
      }
    }
  }
  if (2 * r.skipped_pixels > source.size()) {
    throw WarpDegenerateError("warp: more than half of the source depths are invalid",
                              r.skipped_pixels, source.size());
  }
  r.cleaned_mask = r.raw_mask;
  return r;
}

// Drops true pixels with fewer than w*w/2 true pixels (self included) in their
// border-clipped w x w window. Pixels whose clipped window is entirely true
// are always kept.
inline BinaryMask clean_mask(const BinaryMask& raw, int window) {
  if (window < 3 || window % 2 == 0) throw std::domain_error("clean_mask: window must be odd and >= 3");
  const int w = raw.width(), h = raw.height();
  // Summed-area table with a zero row/column in front.
  std::vector<int> sat(static_cast<std::size_t>((w + 1) * (h + 1)), 0);
  auto at = [&](int x, int y) -> int& { return sat[static_cast<std::size_t>(y * (w + 1) + x)]; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) at(x + 1, y + 1) = (raw(x, y) ? 1 : 0) + at(x, y + 1) + at(x + 1, y) - at(x, y);

  const int r = window / 2;
  BinaryMask out(w, h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!raw(x, y)) continue;
      const int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
      const int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
      const int count = at(x1 + 1, y1 + 1) - at(x0, y1 + 1) - at(x1 + 1, y0) + at(x0, y0);
      const int area = (x1 - x0 + 1) * (y1 - y0 + 1);
      if (2 * count >= window * window || count == area) out(x, y) = 1;
    }
  }
  return out;
}

// Hole filler: false mask pixels are filled, true pixels are returned as-is.
class Inpainter {
 public:
  virtual ~Inpainter() = default;
  virtual ColorImage fill(const ColorImage& image, const BinaryMask& known) const = 0;
  virtual std::string name() const = 0;
};

struct DiffusionConfig {
  double tolerance = 1e-4;
  int max_sweeps = 500;
};

// Harmonic fill: push-pull initialization, then Gauss-Seidel sweeps setting
// each hole pixel to the mean of its in-bounds 4-neighbours.
inline ColorImage inpaint_diffusion(const ColorImage& image, const BinaryMask& known,
                                    const DiffusionConfig& cfg = {}) {
  if (!image.same_shape(known)) throw ValidationError("inpaint_diffusion: mask size mismatch");
  if (count_true(known) == 0) throw InpaintError("inpaint_diffusion: no known pixels to anchor the fill");
  if (count_true(known) == known.size()) return image;

  struct Level {
    Grid<Vec3> value;
    Grid<double> weight;
  };
  std::vector<Level> pyramid;
  {
    Level l0{Grid<Vec3>(image.width(), image.height(), Vec3::Zero()),
             Grid<double>(image.width(), image.height(), 0.0)};
    for (std::size_t i = 0; i < known.size(); ++i) {
      if (known[i]) {
        l0.value[i] = image[i];
        l0.weight[i] = 1.0;
      }
    }
    pyramid.push_back(std::move(l0));
  }
  // Push: average known samples into coarser levels until everything is covered.
  while (true) {
    const Level& fine = pyramid.back();
    const bool complete = std::all_of(fine.weight.data().begin(), fine.weight.data().end(),
                                      [](double v) { return v > 0.0; });
    if (complete || (fine.value.width() == 1 && fine.value.height() == 1)) break;
    const int cw = (fine.value.width() + 1) / 2, ch = (fine.value.height() + 1) / 2;
    Level coarse{Grid<Vec3>(cw, ch, Vec3::Zero()), Grid<double>(cw, ch, 0.0)};
    for (int y = 0; y < fine.value.height(); ++y) {
      for (int x = 0; x < fine.value.width(); ++x) {
        const double wgt = fine.weight(x, y);
        coarse.value(x / 2, y / 2) += wgt * fine.value(x, y);
        coarse.weight(x / 2, y / 2) += wgt;
      }
    }
    for (std::size_t i = 0; i < coarse.weight.size(); ++i) {
      if (coarse.weight[i] > 0.0) {
        coarse.value[i] /= coarse.weight[i];
        coarse.weight[i] = 1.0;
      }
    }
    pyramid.push_back(std::move(coarse));
  }
  // Pull: fill uncovered pixels from the parent level.
  for (std::size_t l = pyramid.size() - 1; l-- > 0;) {
    Level& fine = pyramid[l];
    const Level& parent = pyramid[l + 1];
    for (int y = 0; y < fine.value.height(); ++y) {
      for (int x = 0; x < fine.value.width(); ++x) {
        if (fine.weight(x, y) > 0.0) continue;
        fine.value(x, y) = parent.value(x / 2, y / 2);
      }
    }
  }

  Grid<Vec3> v = std::move(pyramid.front().value);
  const int w = image.width(), h = image.height();
  std::vector<std::size_t> holes;
  for (std::size_t i = 0; i < known.size(); ++i)
    if (!known[i]) holes.push_back(i);
  for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
    double max_change = 0.0;
    for (std::size_t i : holes) {
      const int x = static_cast<int>(i % static_cast<std::size_t>(w));
      const int y = static_cast<int>(i / static_cast<std::size_t>(w));
      Vec3 sum = Vec3::Zero();
      int n = 0;
      if (x > 0) sum += v(x - 1, y), ++n;
      if (x + 1 < w) sum += v(x + 1, y), ++n;
      if (y > 0) sum += v(x, y - 1), ++n;
      if (y + 1 < h) sum += v(x, y + 1), ++n;
      const Vec3 next = sum / n;
      max_change = std::max(max_change, (next - v[i]).cwiseAbs().maxCoeff());
      v[i] = next;
    }
    if (max_change < cfg.tolerance) break;
  }
  ColorImage out = image;
  for (std::size_t i : holes) out[i] = ColorImage::clamp(v[i]);
  return out;
}

class DiffusionInpainter : public Inpainter {
 public:
  explicit DiffusionInpainter(DiffusionConfig cfg = {}) : cfg_(cfg) {}
  ColorImage fill(const ColorImage& image, const BinaryMask& known) const override {
    return inpaint_diffusion(image, known, cfg_);
  }
  std::string name() const override { return "diffusion"; }

 private:
  DiffusionConfig cfg_;
};

// Runs `<command> <image.png> <mask.png> <out.png>`. mask.png is white where
// pixels are known and black at holes. Known pixels of the result are reset to
// the input so the 8-bit round trip cannot alter them.
class ExternalProcessInpainter : public Inpainter {
 public:
  explicit ExternalProcessInpainter(std::string command) : command_(std::move(command)) {}

  ColorImage fill(const ColorImage& image, const BinaryMask& known) const override {
    namespace fs = std::filesystem;
    static std::atomic<unsigned> counter{0};
    const fs::path dir = fs::temp_directory_path() /
                         ("d2t_inpaint_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(dir);
    const fs::path img = dir / "image.png", mask = dir / "mask.png", out = dir / "out.png";
    io::write_png(img, image);
    io::write_png(mask, known);
    const std::string cmd = command_ + " '" + img.string() + "' '" + mask.string() + "' '" + out.string() + "'";
    const int status = std::system(cmd.c_str());
    if (status != 0) {
      fs::remove_all(dir);
      throw InpaintError("external inpainter exited with status " + std::to_string(status));
    }
    ColorImage filled;
    try {
      filled = io::read_image(out);
    } catch (const Error& e) {
      fs::remove_all(dir);
      throw InpaintError(std::string("external inpainter output unreadable: ") + e.what());
    }
    fs::remove_all(dir);
    if (!filled.same_shape(image)) throw InpaintError("external inpainter changed the image size");
    for (std::size_t i = 0; i < known.size(); ++i)
      if (known[i]) filled[i] = image[i];
    return filled;
  }
  std::string name() const override { return "external:" + command_; }

 private:
  std::string command_;
};

struct SynthesisWarning {
  std::size_t pose_index;
  std::string message;
};

struct SynthesisOutput {
  std::vector<WarpResult> results;      // one per successful pose
  std::vector<std::size_t> pose_index;  // index into the NovelPoseSet
  std::vector<SynthesisWarning> warnings;
};

// warp -> clean_mask -> inpaint for every novel pose. A pose that fails is
// recorded as a warning and skipped.
inline SynthesisOutput synthesize(const std::vector<ColorImage>& images,
                                  const std::vector<ScalarMap>& depths,
                                  const std::vector<Pose>& training_poses, const NovelPoseSet& novel,
                                  const CameraIntrinsics& intr, const Inpainter& inpainter,
                                  int window = 5) {
  if (images.size() != depths.size() || images.size() != training_poses.size()) {
    throw ValidationError("synthesize: images, depths and poses disagree in count");
  }
  SynthesisOutput out;
  for (std::size_t k = 0; k < novel.poses.size(); ++k) {
    try {
      const auto src = static_cast<std::size_t>(novel.source_view.at(k));
      if (src >= images.size()) throw ValidationError("source view out of range");
      WarpResult r = warp(images[src], depths[src], training_poses[src], novel.poses[k], intr);
      r.cleaned_mask = clean_mask(r.raw_mask, window);
      r.inpainted = inpainter.fill(r.warped, r.cleaned_mask);
      out.results.push_back(std::move(r));
      out.pose_index.push_back(k);
    } catch (const std::exception& e) {
      out.warnings.push_back({k, e.what()});
    }
  }
  return out;
}

}  // namespace d2t
