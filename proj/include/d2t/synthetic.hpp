#pragma once

// Analytic test scenes: a textured box room with a cube in it, viewed from a
// horizontal arc of cameras. Everything (images, pair pointmaps, confidences,
// mono inverse depth, ground-truth poses) is derived from exact ray casting.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "d2t/coarse_init.hpp"
#include "d2t/core_geometry.hpp"
#include "d2t/image_io.hpp"
#include "d2t/scene_io.hpp"

namespace d2t {

struct SyntheticSpec {
  int n_views = 3;
  int n_test = 2;
  int image_width = 64;
  int image_height = 48;
  int pointmap_width = 32;
  int pointmap_height = 24;
  double focal = 60.0;          // at image resolution
  double arc_degrees = 40.0;    // total span of the training arc
  double arc_radius = 3.0;
  double test_offset_degrees = 5.0;  // held-out cameras sit this far past a training camera
  double mono_scale = 2.0;      // mono = (1 / depth - shift) / scale
  double mono_shift = 0.3;
  double pair_scale_min = 0.5;
  double pair_scale_max = 2.0;
  double pointmap_noise = 0.0;  // relative Gaussian noise on pair pointmaps
  std::uint64_t seed = 7;
};

struct BoxRoom {
  Vec3 room_min{-2.5, -1.5, -1.2};
  Vec3 room_max{2.5, 1.5, 4.0};
  Vec3 cube_center{0.3, 0.5, 2.0};
  double cube_half = 0.5;
  Vec3 target{0.0, 0.1, 2.0};

  struct Hit {
    double t = 0.0;
    Vec3 point;
    int surface = 0;  // 0..5 walls, 6..11 cube faces
  };

  // Nearest surface along origin + t * dir (origin inside the room).
  Hit cast(const Vec3& origin, const Vec3& dir) const {
    Hit best;
    best.t = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (dir[a] == 0.0) continue;
      const double bound = dir[a] > 0.0 ? room_max[a] : room_min[a];
      const double t = (bound - origin[a]) / dir[a];
      if (t > 0.0 && t < best.t) {
        best.t = t;
        best.surface = 2 * a + (dir[a] > 0.0 ? 1 : 0);
      }
    }
    // Slab test for the cube.
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    int axis = -1;
    bool hit = true;
    for (int a = 0; a < 3 && hit; ++a) {
      const double lo = cube_center[a] - cube_half, hi = cube_center[a] + cube_half;
      if (dir[a] == 0.0) {
        if (origin[a] < lo || origin[a] > hi) hit = false;
        continue;
      }
      double ta = (lo - origin[a]) / dir[a], tb = (hi - origin[a]) / dir[a];
      if (ta > tb) std::swap(ta, tb);
      if (ta > t0) {
        t0 = ta;
        axis = a;
      }
      t1 = std::min(t1, tb);
      if (t0 > t1) hit = false;
    }
    if (hit && axis >= 0 && t0 > 0.0 && t0 < best.t) {
      best.t = t0;
      best.surface = 6 + 2 * axis + (dir[axis] > 0.0 ? 0 : 1);
    }
    best.point = origin + best.t * dir;
    return best;
  }

  // Smooth multi-frequency texture, distinct per surface.
  Vec3 color(const Hit& h) const {
    const Vec3& p = h.point;
    const double s = h.surface;
    Vec3 c;
    for (int k = 0; k < 3; ++k) {
      const double ph = 1.3 * k + 0.7 * s;
      c[k] = 0.5 + 0.2 * std::sin(2.1 * p.x() + 1.7 * p.z() + ph) +
             0.15 * std::sin(3.3 * p.y() - 2.6 * p.z() + 2.0 * ph) +
             0.1 * std::cos(4.7 * p.x() + 3.9 * p.y() + 0.5 * ph);
    }
    if (h.surface >= 6) c = 0.5 * c + Vec3(0.35, 0.2, 0.05);
    return ColorImage::clamp(c);
  }
};

inline Pose look_at(const Vec3& center, const Vec3& target) {
  const Vec3 z = (target - center).normalized();
  Vec3 x = Vec3(0.0, 1.0, 0.0).cross(z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 cam_to_world;
  cam_to_world.col(0) = x;
  cam_to_world.col(1) = y;
  cam_to_world.col(2) = z;
  return Pose::from_camera_center(cam_to_world, center);
}

inline Pose arc_pose(const BoxRoom& room, double radius, double degrees) {
  const double a = degrees * M_PI / 180.0;
  const Vec3 c = room.target + radius * Vec3(-std::sin(a), -0.15 * std::cos(2.0 * a), -std::cos(a));
  return look_at(c, room.target);
}

struct RayCast {
  ColorImage image;
  ScalarMap depth;  // camera z
};

inline RayCast cast_view(const BoxRoom& room, const Pose& pose, const CameraIntrinsics& intr) {
  RayCast out{ColorImage(intr.width, intr.height), ScalarMap(intr.width, intr.height)};
  const Mat3 rt = pose.rotation.transpose();
  const Vec3 origin = pose.center();
  for (int y = 0; y < intr.height; ++y) {
    for (int x = 0; x < intr.width; ++x) {
      const Vec3 d_cam((x - intr.cx()) / intr.focal, (y - intr.cy()) / intr.focal, 1.0);
      const auto hit = room.cast(origin, rt * d_cam);
      out.depth(x, y) = hit.t;  // d_cam has unit z, so t is camera depth
      out.image.set(x, y, room.color(hit));
    }
  }
  return out;
}

struct SyntheticScene {
  SyntheticSpec spec;
  std::vector<ColorImage> images;
  std::vector<ColorImage> test_images;
  std::vector<ScalarMap> depths;  // image resolution
  std::vector<ScalarMap> mono;
  ViewGraph graph;
  GroundTruth gt;
};

// Every view appears first in at least one pair: (a, b) is stored in a's frame
// when a + b is even, otherwise in b's frame.
inline std::pair<int, int> pair_orientation(int a, int b) {
  return (a + b) % 2 == 0 ? std::make_pair(a, b) : std::make_pair(b, a);
}

inline SyntheticScene make_box_room(const SyntheticSpec& spec) {
  if (spec.n_views < 2) throw ValidationError("synthetic scene: need at least two views");
  BoxRoom room;
  SyntheticScene s;
  s.spec = spec;
  std::mt19937_64 rng(spec.seed);
  const CameraIntrinsics img(spec.focal, spec.image_width, spec.image_height);
  const CameraIntrinsics pm = img.resized(spec.pointmap_width, spec.pointmap_height);
  s.gt.focal = spec.focal;

  std::vector<double> angles;
  for (int k = 0; k < spec.n_views; ++k) {
    angles.push_back(-0.5 * spec.arc_degrees + spec.arc_degrees * k / (spec.n_views - 1));
  }
  for (double a : angles) s.gt.views.push_back(arc_pose(room, spec.arc_radius, a));
  for (int k = 0; k < spec.n_test; ++k) {
    const int anchor = k % spec.n_views;
    const double sign = anchor == spec.n_views - 1 ? -1.0 : 1.0;
    s.gt.tests.push_back(arc_pose(room, spec.arc_radius, angles[static_cast<std::size_t>(anchor)] + sign * spec.test_offset_degrees));
  }

  std::vector<PointMap> cam_points;
  std::vector<ScalarMap> conf;
  for (int k = 0; k < spec.n_views; ++k) {
    const auto& pose = s.gt.views[static_cast<std::size_t>(k)];
    RayCast rc = cast_view(room, pose, img);
    s.images.push_back(rc.image);
    ScalarMap mono(img.width, img.height);
    for (std::size_t i = 0; i < mono.size(); ++i) mono[i] = (1.0 / rc.depth[i] - spec.mono_shift) / spec.mono_scale;
    s.mono.push_back(std::move(mono));
    s.depths.push_back(std::move(rc.depth));

    const RayCast low = cast_view(room, pose, pm);
    PointMap pts(pm.width, pm.height);
    ScalarMap c(pm.width, pm.height);
    for (int y = 0; y < pm.height; ++y) {
      for (int x = 0; x < pm.width; ++x) {
        pts(x, y) = unproject(Vec2(x, y), low.depth(x, y), pm);
        c(x, y) = 1.5 + 0.8 * std::sin(0.37 * x + 0.9 * k) * std::cos(0.29 * y - 0.4 * k);
      }
    }
    cam_points.push_back(std::move(pts));
    conf.push_back(std::move(c));
  }
  for (const auto& pose : s.gt.tests) s.test_images.push_back(cast_view(room, pose, img).image);

  std::uniform_real_distribution<double> log_scale(std::log(spec.pair_scale_min), std::log(spec.pair_scale_max));
  std::normal_distribution<double> noise(0.0, 1.0);
  s.graph.n_views = spec.n_views;
  for (int a = 0; a < spec.n_views; ++a) {
    for (int b = a + 1; b < spec.n_views; ++b) {
      const auto [n, m] = pair_orientation(a, b);
      const double scale = std::exp(log_scale(rng));
      const Pose m_to_n = s.gt.views[static_cast<std::size_t>(n)] * s.gt.views[static_cast<std::size_t>(m)].inverse();
      PairPrediction p;
      p.view_n = n;
      p.view_m = m;
      p.pointmap_n = PointMap(pm.width, pm.height);
      p.pointmap_m = PointMap(pm.width, pm.height);
      for (std::size_t i = 0; i < p.pointmap_n.size(); ++i) {
        Vec3 pn = scale * cam_points[static_cast<std::size_t>(n)][i];
        Vec3 pmx = scale * m_to_n.apply(cam_points[static_cast<std::size_t>(m)][i]);
        if (spec.pointmap_noise > 0.0) {
          pn += spec.pointmap_noise * pn.norm() * Vec3(noise(rng), noise(rng), noise(rng));
          pmx += spec.pointmap_noise * pmx.norm() * Vec3(noise(rng), noise(rng), noise(rng));
        }
        p.pointmap_n[i] = pn;
        p.pointmap_m[i] = pmx;
      }
      p.confidence_n = conf[static_cast<std::size_t>(n)];
      p.confidence_m = conf[static_cast<std::size_t>(m)];
      s.graph.edges.push_back(std::move(p));
    }
  }
  return s;
}

inline json synthetic_spec_json(const SyntheticSpec& s) {
  return json{{"n_views", s.n_views},
              {"n_test", s.n_test},
              {"image_width", s.image_width},
              {"image_height", s.image_height},
              {"pointmap_width", s.pointmap_width},
              {"pointmap_height", s.pointmap_height},
              {"focal", s.focal},
              {"arc_degrees", s.arc_degrees},
              {"arc_radius", s.arc_radius},
              {"test_offset_degrees", s.test_offset_degrees},
              {"mono_scale", s.mono_scale},
              {"mono_shift", s.mono_shift},
              {"pair_scale_min", s.pair_scale_min},
              {"pair_scale_max", s.pair_scale_max},
              {"pointmap_noise", s.pointmap_noise},
              {"seed", s.seed},
              {"generator", "box-room"}};
}

inline void write_scene(const fs::path& dir, const SyntheticScene& s) {
  for (std::size_t k = 0; k < s.images.size(); ++k) {
    io::write_png(image_path(dir, static_cast<int>(k)), s.images[k]);
    io::write_pfm(mono_path(dir, static_cast<int>(k)), s.mono[k]);
  }
  for (std::size_t k = 0; k < s.test_images.size(); ++k) io::write_png(test_image_path(dir, static_cast<int>(k)), s.test_images[k]);
  for (const auto& e : s.graph.edges) write_pair(dir, e);
  write_json(dir / "gt" / "poses.json", ground_truth_to_json(s.gt));
  write_json(dir / "config.json", synthetic_spec_json(s.spec));
}

}  // namespace d2t
