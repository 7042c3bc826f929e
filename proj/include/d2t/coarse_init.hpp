#pragma once

// Coarse construction: shared-focal estimation from pairwise pointmaps and
// global alignment of all pairwise pointmaps into one world frame with
// per-view poses and per-pixel depths.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>
#include <vector>

#include "d2t/core_geometry.hpp"
#include "d2t/errors.hpp"

namespace d2t {

// Two pointmaps and confidences for the unordered pair {view_n, view_m}; both
// pointmaps live in view_n's camera frame, at an arbitrary per-pair scale.
struct PairPrediction {
  int view_n = 0;
  int view_m = 1;
  PointMap pointmap_n;
  PointMap pointmap_m;
  ScalarMap confidence_n;
  ScalarMap confidence_m;

  int width() const { return pointmap_n.width(); }
  int height() const { return pointmap_n.height(); }

  void validate() const {
    if (view_n == view_m) throw ValidationError("PairPrediction: edge joins a view to itself");
    const int w = width(), h = height();
    if (!pointmap_m.same_shape(w, h) || !confidence_n.same_shape(w, h) ||
        !confidence_m.same_shape(w, h)) {
      throw ValidationError("PairPrediction: grids disagree in size");
    }
    for (const auto* c : {&confidence_n, &confidence_m}) {
      for (double v : c->data()) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
          throw ValidationError("PairPrediction: confidence must be finite and non-negative");
        }
      }
    }
    for (const auto* p : {&pointmap_n, &pointmap_m}) {
      for (const Vec3& v : p->data()) {
        if (!v.allFinite()) throw ValidationError("PairPrediction: non-finite pointmap entry");
      }
    }
  }
};

struct ViewGraph {
  int n_views = 0;
  std::vector<PairPrediction> edges;

  void validate() const {
    if (n_views < 2) throw ValidationError("ViewGraph: need at least two views");
    const std::size_t expected = static_cast<std::size_t>(n_views) * (n_views - 1) / 2;
    if (edges.size() != expected) {
      throw ValidationError("ViewGraph: expected " + std::to_string(expected) +
                            " edges for a complete graph, got " + std::to_string(edges.size()));
    }
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(n_views * n_views), 0);
    for (const auto& e : edges) {
      e.validate();
      if (e.view_n < 0 || e.view_m < 0 || e.view_n >= n_views || e.view_m >= n_views) {
        throw ValidationError("ViewGraph: edge references an unknown view");
      }
      const int a = std::min(e.view_n, e.view_m), b = std::max(e.view_n, e.view_m);
      auto& s = seen[static_cast<std::size_t>(a * n_views + b)];
      if (s) throw ValidationError("ViewGraph: duplicate edge");
      s = 1;
      if (!e.pointmap_n.same_shape(edges.front().pointmap_n)) {
        throw ValidationError("ViewGraph: pair resolutions differ");
      }
    }
  }
};

struct FocalConfig {
  int max_iterations = 50;
  double relative_tolerance = 1e-6;
  std::size_t min_pixels = 10;
};

// Confidence-weighted L1 fit of f in  sum C * |(i - W/2, j - H/2) - f * (X, Y) / Z|
// by Weiszfeld iterations (iteratively reweighted least squares).
inline double estimate_focal(const PointMap& pointmap, const ScalarMap& confidence,
                             const FocalConfig& cfg = {}) {
  if (!pointmap.same_shape(confidence)) {
    throw ValidationError("estimate_focal: pointmap and confidence differ in size");
  }
  const int w = pointmap.width(), h = pointmap.height();
  std::vector<Vec2> pix, ray;
  std::vector<double> weight;
  bool any_signal = false;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double c = confidence(x, y);
      if (!(c > 0.0)) continue;
      any_signal = true;
      const Vec3& p = pointmap(x, y);
      if (!(p.z() > 0.0) || !p.allFinite()) continue;
      pix.emplace_back(x - 0.5 * w, y - 0.5 * h);
      ray.emplace_back(p.x() / p.z(), p.y() / p.z());
      weight.push_back(c);
    }
  }
  if (!any_signal) throw NoSignalError("estimate_focal: all confidences are zero");
  if (pix.size() < cfg.min_pixels) {
    throw DegenerateGeometryError("estimate_focal: too few confident points in front of the camera");
  }

  auto solve = [&](auto&& weight_of) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < pix.size(); ++i) {
      const double wi = weight_of(i);
      num += wi * pix[i].dot(ray[i]);
      den += wi * ray[i].squaredNorm();
    }
    return std::pair{num, den};
  };

  auto [num0, den0] = solve([&](std::size_t i) { return weight[i]; });
  double total_w = std::accumulate(weight.begin(), weight.end(), 0.0);
  if (!(den0 > 1e-18 * total_w)) {
    throw DegenerateGeometryError("estimate_focal: all rays lie on the optical axis");
  }
  double f = num0 / den0;
  if (!(f > 0.0)) throw DegenerateGeometryError("estimate_focal: non-positive focal estimate");

  double mean_pix = 0.0;
  for (const auto& p : pix) mean_pix += p.norm();
  mean_pix /= static_cast<double>(pix.size());
  const double eps = 1e-10 * (1.0 + mean_pix);

  for (int it = 0; it < cfg.max_iterations; ++it) {
    auto [num, den] = solve([&](std::size_t i) {
      return weight[i] / std::max((pix[i] - f * ray[i]).norm(), eps);
    });
    if (!(den > 0.0)) break;
    const double next = num / den;
    const double change = std::abs(next - f) / f;
    f = next;
    if (change < cfg.relative_tolerance) break;
  }
  if (!(f > 0.0) || !std::isfinite(f)) {
    throw DegenerateGeometryError("estimate_focal: iterations left the positive range");
  }
  return f;
}

inline double estimate_focal(const PairPrediction& pred, const FocalConfig& cfg = {}) {
  return estimate_focal(pred.pointmap_n, pred.confidence_n, cfg);
}

inline double average_focal(const std::vector<double>& focals) {
  if (focals.empty()) throw ValidationError("average_focal: empty list");
  return std::accumulate(focals.begin(), focals.end(), 0.0) / static_cast<double>(focals.size());
}

namespace detail {

struct PnpResult {
  Pose pose;
  double cost = std::numeric_limits<double>::infinity();
};

struct PnpData {
  std::vector<Vec3> points;
  std::vector<Vec2> normalized;
  std::vector<double> weight;
};

inline double pnp_cost(const PnpData& d, const Pose& pose) {
  double cost = 0.0;
  for (std::size_t i = 0; i < d.points.size(); ++i) {
    const Vec3 q = pose.apply(d.points[i]);
    if (!(q.z() > 1e-9)) {
      cost += d.weight[i] * 1e6;
      continue;
    }
    cost += d.weight[i] * (q.head<2>() / q.z() - d.normalized[i]).squaredNorm();
  }
  return cost;
}

// Translation minimizing the cross-product residual [n]x (R X + t) for a fixed R.
inline Vec3 pnp_translation(const PnpData& d, const Mat3& r) {
  Mat3 a = Mat3::Zero();
  Vec3 b = Vec3::Zero();
  for (std::size_t i = 0; i < d.points.size(); ++i) {
    const Mat3 s = skew(Vec3(d.normalized[i].x(), d.normalized[i].y(), 1.0));
    const Mat3 sts = s.transpose() * s;
    a += d.weight[i] * sts;
    b -= d.weight[i] * sts * (r * d.points[i]);
  }
  return a.ldlt().solve(b);
}

inline PnpResult pnp_refine(const PnpData& d, Pose pose, int iterations) {
  double cost = pnp_cost(d, pose);
  double lambda = 1e-3;
  for (int it = 0; it < iterations; ++it) {
    Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
    Vec6 jtr = Vec6::Zero();
    for (std::size_t i = 0; i < d.points.size(); ++i) {
      const Vec3 q = pose.apply(d.points[i]);
      if (!(q.z() > 1e-9)) continue;
      const double iz = 1.0 / q.z();
      Eigen::Matrix<double, 2, 3> dpi;
      dpi << iz, 0.0, -q.x() * iz * iz, 0.0, iz, -q.y() * iz * iz;
      Eigen::Matrix<double, 3, 6> dq;
      dq.leftCols<3>() = -skew(q);
      dq.rightCols<3>() = Mat3::Identity();
      const Eigen::Matrix<double, 2, 6> j = dpi * dq;
      const Vec2 r = q.head<2>() * iz - d.normalized[i];
      jtj += d.weight[i] * j.transpose() * j;
      jtr += d.weight[i] * j.transpose() * r;
    }
    bool improved = false;
    for (int attempt = 0; attempt < 10; ++attempt) {
      Eigen::Matrix<double, 6, 6> a = jtj;
      a.diagonal() += lambda * (jtj.diagonal().array() + 1e-12).matrix();
      const Vec6 step = -a.ldlt().solve(jtr);
      if (!step.allFinite()) break;
      const Pose cand = perturb_left(pose, step);
      const double c = pnp_cost(d, cand);
      if (c < cost) {
        const double rel = (cost - c) / std::max(cost, 1e-300);
        pose = cand;
        cost = c;
        lambda = std::max(lambda * 0.3, 1e-12);
        improved = rel > 1e-15;
        break;
      }
      lambda *= 10.0;
    }
    if (!improved) break;
  }
  return {pose, cost};
}

// Pose of a camera (reference frame -> camera) observing known reference-frame
// points at the given pixels. Seeds Levenberg-Marquardt from a fixed set of
// candidate rotations so it does not depend on a prior.
inline Pose estimate_camera_pose(const PointMap& points, const ScalarMap& confidence,
                                 const CameraIntrinsics& intr) {
  PnpData all;
  for (int y = 0; y < points.height(); ++y) {
    for (int x = 0; x < points.width(); ++x) {
      const double c = confidence(x, y);
      if (!(c > 0.0) || !points(x, y).allFinite()) continue;
      all.points.push_back(points(x, y));
      all.normalized.emplace_back((x - intr.cx()) / intr.focal, (y - intr.cy()) / intr.focal);
      all.weight.push_back(c);
    }
  }
  if (all.points.size() < 6) {
    throw DegenerateGeometryError("estimate_camera_pose: fewer than six usable points");
  }
  auto subsample = [&](std::size_t cap) {
    if (all.points.size() <= cap) return all;
    PnpData s;
    const std::size_t n = all.points.size();
    for (std::size_t k = 0; k < cap; ++k) {
      const std::size_t i = k * n / cap;
      s.points.push_back(all.points[i]);
      s.normalized.push_back(all.normalized[i]);
      s.weight.push_back(all.weight[i]);
    }
    return s;
  };
  const PnpData coarse = subsample(256);

  PnpResult best;
  const double deg = M_PI / 180.0;
  for (int yaw = -135; yaw <= 180; yaw += 45) {
    for (int pitch : {0, -45, 45}) {
      const Mat3 r = so3_exp(Vec3(0.0, yaw * deg, 0.0)) * so3_exp(Vec3(pitch * deg, 0.0, 0.0));
      Pose seed(r, pnp_translation(coarse, r));
      PnpResult res = pnp_refine(coarse, seed, 25);
      if (res.cost < best.cost) best = res;
    }
  }
  return pnp_refine(subsample(4096), best.pose, 100).pose;
}

}  // namespace detail

struct AlignConfig {
  int iterations = 300;
  double initial_step = 1.0;
  double step_decay = 0.995;
  double armijo = 1e-4;
  int max_backtracks = 40;
  double divergence_factor = 10.0;
  std::size_t min_confident_pixels = 100;
};

struct AlignTrace {
  std::vector<double> objective;      // after every accepted iteration, [0] = initial
  std::vector<double> scale_product;  // prod sigma_e, same indexing
  int iterations_run = 0;
};

// Optimization state for the global pointmap alignment. World points are never
// stored; world_point() derives them from (pose, depth, intrinsics).
struct GlobalAlignmentState {
  CameraIntrinsics intrinsics;
  std::vector<Pose> edge_poses;
  std::vector<double> edge_log_scales;
  std::vector<Pose> view_poses;
  std::vector<ScalarMap> depths;
  AlignTrace trace;

  int n_views() const { return static_cast<int>(view_poses.size()); }
  double edge_scale(std::size_t e) const { return std::exp(edge_log_scales[e]); }

  double scale_product() const {
    double s = 0.0;
    for (double v : edge_log_scales) s += v;
    return std::exp(s);
  }

  Vec3 camera_point(int view, int x, int y) const {
    const double d = depths[static_cast<std::size_t>(view)](x, y);
    return Vec3((x - intrinsics.cx()) * d / intrinsics.focal,
                (y - intrinsics.cy()) * d / intrinsics.focal, d);
  }

  // T_n^{-1} applied to the unprojected depth.
  Vec3 world_point(int view, int x, int y) const {
    const Pose& p = view_poses[static_cast<std::size_t>(view)];
    return p.rotation.transpose() * (camera_point(view, x, y) - p.translation);
  }

  PointMap world_points(int view) const {
    const auto& d = depths[static_cast<std::size_t>(view)];
    PointMap out(d.width(), d.height());
    for (int y = 0; y < d.height(); ++y)
      for (int x = 0; x < d.width(); ++x) out(x, y) = world_point(view, x, y);
    return out;
  }
};

inline std::vector<ScalarMap> extract_depths(const GlobalAlignmentState& state) {
  return state.depths;
}

namespace detail {

struct AlignGradient {
  std::vector<Vec6> edge_pose;  // (rotation, translation)
  std::vector<double> edge_scale;
  std::vector<Vec6> view_pose;
  std::vector<ScalarMap> depth;
  // Jacobi preconditioner, one scalar per block / pixel.
  std::vector<Eigen::Vector2d> edge_pose_h;
  std::vector<double> edge_scale_h;
  std::vector<Eigen::Vector2d> view_pose_h;
  std::vector<ScalarMap> depth_h;
};

// Sum over edges, member views and pixels of C * |chi - sigma_e T_e X|^2.
inline double alignment_objective(const GlobalAlignmentState& s, const ViewGraph& g,
                                  AlignGradient* grad) {
  if (grad) {
    const std::size_t ne = g.edges.size(), nv = s.view_poses.size();
    grad->edge_pose.assign(ne, Vec6::Zero());
    grad->edge_scale.assign(ne, 0.0);
    grad->view_pose.assign(nv, Vec6::Zero());
    grad->edge_pose_h.assign(ne, Eigen::Vector2d::Zero());
    grad->edge_scale_h.assign(ne, 0.0);
    grad->view_pose_h.assign(nv, Eigen::Vector2d::Zero());
    grad->depth.clear();
    grad->depth_h.clear();
    for (const auto& d : s.depths) {
      grad->depth.emplace_back(d.width(), d.height(), 0.0);
      grad->depth_h.emplace_back(d.width(), d.height(), 0.0);
    }
  }
  double total = 0.0;
  const double f = s.intrinsics.focal;
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const PairPrediction& pred = g.edges[e];
    const Pose& te = s.edge_poses[e];
    const double sigma = s.edge_scale(e);
    for (int side = 0; side < 2; ++side) {
      const int v = side == 0 ? pred.view_n : pred.view_m;
      const PointMap& xmap = side == 0 ? pred.pointmap_n : pred.pointmap_m;
      const ScalarMap& cmap = side == 0 ? pred.confidence_n : pred.confidence_m;
      const Pose& tv = s.view_poses[static_cast<std::size_t>(v)];
      for (int y = 0; y < xmap.height(); ++y) {
        for (int x = 0; x < xmap.width(); ++x) {
          const double c = cmap(x, y);
          if (c == 0.0) continue;
          const Vec3 a = te.rotation * xmap(x, y);
          const Vec3 target = sigma * (a + te.translation);
          const Vec3 cam = s.camera_point(v, x, y);
          const Vec3 chi = tv.rotation.transpose() * (cam - tv.translation);
          const Vec3 r = chi - target;
          total += c * r.squaredNorm();
          if (!grad) continue;
          const Vec3 gr = 2.0 * c * r;
          const Vec3 h = tv.rotation * gr;
          const Vec3 ray((x - s.intrinsics.cx()) / f, (y - s.intrinsics.cy()) / f, 1.0);
          grad->depth[static_cast<std::size_t>(v)](x, y) += h.dot(ray);
          grad->depth_h[static_cast<std::size_t>(v)](x, y) += 2.0 * c * ray.squaredNorm();
          Vec6& gv = grad->view_pose[static_cast<std::size_t>(v)];
          gv.head<3>() += h.cross(cam);
          gv.tail<3>() -= h;
          grad->view_pose_h[static_cast<std::size_t>(v)] +=
              Eigen::Vector2d(2.0 * c * cam.squaredNorm(), 2.0 * c);
          Vec6& ge = grad->edge_pose[e];
          ge.head<3>() += sigma * gr.cross(a);
          ge.tail<3>() -= sigma * gr;
          grad->edge_pose_h[e] +=
              Eigen::Vector2d(2.0 * c * sigma * sigma * a.squaredNorm(), 2.0 * c * sigma * sigma);
          grad->edge_scale[e] -= gr.dot(target);
          grad->edge_scale_h[e] += 2.0 * c * target.squaredNorm();
        }
      }
    }
  }
  return total;
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

inline double mean_of(const ScalarMap& m) {
  double s = 0.0;
  for (double v : m.data()) s += v;
  return s / static_cast<double>(m.size());
}

}  // namespace detail

// Initialization: per-edge relative pose by PnP on the second pointmap,
// per-view poses chained along a maximum-confidence spanning tree rooted at
// view 0, per-view depth from the most confident pointmap of that view, and
// scales renormalized to prod sigma_e = 1.
inline GlobalAlignmentState initialize_alignment(const ViewGraph& graph,
                                                 const CameraIntrinsics& intr) {
  const int nv = graph.n_views;
  const std::size_t ne = graph.edges.size();
  const int w = graph.edges.front().width(), h = graph.edges.front().height();
  if (!intr.contains(0, 0) || intr.width != w || intr.height != h) {
    throw ValidationError("align_global: intrinsics do not match pointmap resolution");
  }

  // Own-frame pointmaps of both members of every edge, in edge units.
  std::vector<Pose> relative(ne);  // view_n camera -> view_m camera, edge units
  std::vector<std::array<PointMap, 2>> own(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    const auto& p = graph.edges[e];
    relative[e] = detail::estimate_camera_pose(p.pointmap_m, p.confidence_m, intr);
    own[e][0] = p.pointmap_n;
    own[e][1] = PointMap(w, h);
    for (std::size_t i = 0; i < p.pointmap_m.size(); ++i) {
      own[e][1][i] = relative[e].apply(p.pointmap_m[i]);
    }
  }

  auto side_of = [&](std::size_t e, int v) { return graph.edges[e].view_n == v ? 0 : 1; };
  auto conf_of = [&](std::size_t e, int side) -> const ScalarMap& {
    return side == 0 ? graph.edges[e].confidence_n : graph.edges[e].confidence_m;
  };
  auto depth_from = [&](std::size_t e, int side, double sigma) {
    ScalarMap d(w, h);
    std::vector<double> valid;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double z = own[e][static_cast<std::size_t>(side)][i].z();
      if (z > 0.0 && std::isfinite(z)) valid.push_back(sigma * z);
    }
    const double fallback = valid.empty() ? 1.0 : detail::median_of(valid);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double z = own[e][static_cast<std::size_t>(side)][i].z();
      d[i] = (z > 0.0 && std::isfinite(z)) ? sigma * z : fallback;
    }
    return d;
  };
  // Weighted least-squares scale mapping edge-unit depths onto world depths.
  auto fit_scale = [&](std::size_t e, int v, const ScalarMap& world_depth) {
    const int side = side_of(e, v);
    const ScalarMap& c = conf_of(e, side);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < world_depth.size(); ++i) {
      const double z = own[e][static_cast<std::size_t>(side)][i].z();
      if (!(z > 0.0) || !std::isfinite(z)) continue;
      num += c[i] * world_depth[i] * z;
      den += c[i] * z * z;
    }
    return den > 0.0 ? num / den : 1.0;
  };
  auto best_edge_for = [&](int v) {
    std::size_t best = ne;
    double best_c = -1.0;
    for (std::size_t e = 0; e < ne; ++e) {
      const auto& p = graph.edges[e];
      if (p.view_n != v && p.view_m != v) continue;
      const double c = detail::mean_of(conf_of(e, side_of(e, v)));
      if (c > best_c) {
        best_c = c;
        best = e;
      }
    }
    return best;
  };

  std::vector<Pose> poses(static_cast<std::size_t>(nv));
  std::vector<ScalarMap> depth(static_cast<std::size_t>(nv));
  std::vector<std::uint8_t> known(static_cast<std::size_t>(nv), 0);
  known[0] = 1;
  {
    const std::size_t e0 = best_edge_for(0);
    depth[0] = depth_from(e0, side_of(e0, 0), 1.0);
  }
  // Prim's algorithm over mean edge confidence.
  for (int added = 1; added < nv; ++added) {
    std::size_t best = ne;
    double best_w = -1.0;
    for (std::size_t e = 0; e < ne; ++e) {
      const auto& p = graph.edges[e];
      if (known[static_cast<std::size_t>(p.view_n)] == known[static_cast<std::size_t>(p.view_m)]) continue;
      const double wgt = detail::mean_of(p.confidence_n) + detail::mean_of(p.confidence_m);
      if (wgt > best_w) {
        best_w = wgt;
        best = e;
      }
    }
    if (best == ne) throw ValidationError("align_global: view graph is disconnected");
    const auto& p = graph.edges[best];
    const bool from_n = known[static_cast<std::size_t>(p.view_n)] != 0;
    const int vk = from_n ? p.view_n : p.view_m;
    const int vu = from_n ? p.view_m : p.view_n;
    const double sigma = fit_scale(best, vk, depth[static_cast<std::size_t>(vk)]);
    const Pose rel(relative[best].rotation, sigma * relative[best].translation);
    poses[static_cast<std::size_t>(vu)] =
        (from_n ? rel : rel.inverse()) * poses[static_cast<std::size_t>(vk)];
    depth[static_cast<std::size_t>(vu)] = depth_from(best, side_of(best, vu), sigma);
    known[static_cast<std::size_t>(vu)] = 1;
  }

  GlobalAlignmentState s;
  s.intrinsics = intr;
  s.edge_poses.resize(ne);
  s.edge_log_scales.resize(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    const auto& p = graph.edges[e];
    // Least squares over both member views.
    double num = 0.0, den = 0.0;
    for (int v : {p.view_n, p.view_m}) {
      const int side = side_of(e, v);
      const ScalarMap& c = conf_of(e, side);
      for (std::size_t i = 0; i < c.size(); ++i) {
        const double z = own[e][static_cast<std::size_t>(side)][i].z();
        if (!(z > 0.0) || !std::isfinite(z)) continue;
        num += c[i] * depth[static_cast<std::size_t>(v)][i] * z;
        den += c[i] * z * z;
      }
    }
    const double sigma = den > 0.0 && num > 0.0 ? num / den : 1.0;
    s.edge_log_scales[e] = std::log(sigma);
  }
  for (int v = 0; v < nv; ++v) {
    const std::size_t e = best_edge_for(v);
    depth[static_cast<std::size_t>(v)] =
        depth_from(e, side_of(e, v), std::exp(s.edge_log_scales[e]));
  }

  // Gauge: zero-mean log scales, world rescaled to match.
  const double mean_log =
      std::accumulate(s.edge_log_scales.begin(), s.edge_log_scales.end(), 0.0) / static_cast<double>(ne);
  const double k = std::exp(-mean_log);
  for (auto& ls : s.edge_log_scales) ls -= mean_log;
  for (auto& d : depth)
    for (auto& v : d.data()) v *= k;
  for (auto& p : poses) p.translation *= k;

  for (std::size_t e = 0; e < ne; ++e) {
    const Pose& tn = poses[static_cast<std::size_t>(graph.edges[e].view_n)];
    const double sigma = std::exp(s.edge_log_scales[e]);
    const Mat3 r = tn.rotation.transpose();
    s.edge_poses[e] = Pose(r, -r * tn.translation / sigma);
  }
  s.view_poses = std::move(poses);
  s.depths = std::move(depth);
  return s;
}

// Gradient descent with a Jacobi-scaled gradient and Armijo backtracking over
// (T_e, sigma_e, T_n, D_n), view 0 pinned to the identity and
// log sigma kept at zero mean so that prod sigma_e = 1.
inline GlobalAlignmentState align_global(const ViewGraph& graph, const CameraIntrinsics& intr,
                                         const AlignConfig& cfg = {}) {
  graph.validate();
  for (const auto& e : graph.edges) {
    for (const ScalarMap* c : {&e.confidence_n, &e.confidence_m}) {
      std::vector<double> v = c->data();
      const auto k = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 10);
      std::nth_element(v.begin(), k, v.end());
      const double p10 = *k;
      const auto n = std::count_if(c->data().begin(), c->data().end(),
                                   [&](double x) { return x > 0.0 && x >= p10; });
      if (static_cast<std::size_t>(n) < cfg.min_confident_pixels) {
        throw ValidationError("align_global: pair (" + std::to_string(e.view_n) + ", " +
                              std::to_string(e.view_m) + ") has too few confident pixels");
      }
    }
  }

  GlobalAlignmentState s = initialize_alignment(graph, intr);
  const std::size_t ne = graph.edges.size();
  const std::size_t nv = static_cast<std::size_t>(graph.n_views);

  detail::AlignGradient g;
  double obj = detail::alignment_objective(s, graph, &g);
  const double obj0 = obj;
  s.trace.objective.push_back(obj);
  s.trace.scale_product.push_back(s.scale_product());
  if (!std::isfinite(obj)) {
    throw OptimizationFailure("align_global: non-finite initial objective", s.trace.objective);
  }

  double step = cfg.initial_step;
  double base = cfg.initial_step;
  for (int it = 0; it < cfg.iterations; ++it) {
    // Projected, preconditioned descent direction.
    const auto dir_scale = [](double gv, double h) { return h > 0.0 ? gv / h : 0.0; };
    std::vector<Vec6> d_edge(ne), d_view(nv);
    std::vector<double> d_scale(ne);
    std::vector<ScalarMap> d_depth;
    double decrease = 0.0;  // g . (preconditioned g)
    for (std::size_t e = 0; e < ne; ++e) {
      for (int k = 0; k < 3; ++k) {
        d_edge[e][k] = dir_scale(g.edge_pose[e][k], g.edge_pose_h[e][0]);
        d_edge[e][k + 3] = dir_scale(g.edge_pose[e][k + 3], g.edge_pose_h[e][1]);
      }
      decrease += g.edge_pose[e].dot(d_edge[e]);
    }
    double mean_gs = 0.0;
    for (std::size_t e = 0; e < ne; ++e) {
      d_scale[e] = dir_scale(g.edge_scale[e], g.edge_scale_h[e]);
      mean_gs += d_scale[e];
    }
    mean_gs /= static_cast<double>(ne);
    for (std::size_t e = 0; e < ne; ++e) {
      d_scale[e] -= mean_gs;
      decrease += g.edge_scale[e] * d_scale[e];
    }
    for (std::size_t v = 0; v < nv; ++v) {
      d_view[v].setZero();
      if (v != 0) {
        for (int k = 0; k < 3; ++k) {
          d_view[v][k] = dir_scale(g.view_pose[v][k], g.view_pose_h[v][0]);
          d_view[v][k + 3] = dir_scale(g.view_pose[v][k + 3], g.view_pose_h[v][1]);
        }
      }
      decrease += g.view_pose[v].dot(d_view[v]);
      ScalarMap dd(g.depth[v].width(), g.depth[v].height());
      for (std::size_t i = 0; i < dd.size(); ++i) {
        dd[i] = dir_scale(g.depth[v][i], g.depth_h[v][i]);
        decrease += g.depth[v][i] * dd[i];
      }
      d_depth.push_back(std::move(dd));
    }
    if (!(decrease > 0.0)) break;

    auto candidate = [&](double eta) {
      GlobalAlignmentState c = s;
      for (std::size_t e = 0; e < ne; ++e) {
        const Vec6 de = -eta * d_edge[e];
        c.edge_poses[e].rotation = so3_exp(de.head<3>()) * c.edge_poses[e].rotation;
        c.edge_poses[e].translation += de.tail<3>();
        c.edge_poses[e].enforce_rotation();
        c.edge_log_scales[e] -= eta * d_scale[e];
      }
      const double m =
          std::accumulate(c.edge_log_scales.begin(), c.edge_log_scales.end(), 0.0) / static_cast<double>(ne);
      for (auto& ls : c.edge_log_scales) ls -= m;
      for (std::size_t v = 1; v < nv; ++v) {
        c.view_poses[v] = perturb_left(c.view_poses[v], Vec6(-eta * d_view[v]));
      }
      for (std::size_t v = 0; v < nv; ++v) {
        for (std::size_t i = 0; i < c.depths[v].size(); ++i) {
          const double nd = c.depths[v][i] - eta * d_depth[v][i];
          // Depth stays positive: halve towards zero instead of crossing it.
          c.depths[v][i] = nd > 0.0 ? nd : 0.5 * c.depths[v][i];
        }
      }
      return c;
    };

    step = std::min(base, 2.0 * step);
    bool accepted = false;
    for (int bt = 0; bt < cfg.max_backtracks; ++bt, step *= 0.5) {
      GlobalAlignmentState c = candidate(step);
      const double co = detail::alignment_objective(c, graph, nullptr);
      if (!std::isfinite(co) || co > cfg.divergence_factor * std::max(obj0, 1e-300)) {
        if (!std::isfinite(co) || bt + 1 == cfg.max_backtracks) {
          s.trace.objective.push_back(co);
          throw OptimizationFailure("align_global: objective diverged", s.trace.objective);
        }
        continue;
      }
      if (co <= obj - cfg.armijo * step * decrease) {
        c.trace = std::move(s.trace);
        s = std::move(c);
        obj = detail::alignment_objective(s, graph, &g);
        accepted = true;
        break;
      }
    }
    base *= cfg.step_decay;
    if (!accepted) break;
    s.trace.objective.push_back(obj);
    s.trace.scale_product.push_back(s.scale_product());
    s.trace.iterations_run = it + 1;
  }
  return s;
}

inline double alignment_objective(const GlobalAlignmentState& s, const ViewGraph& g) {
  return detail::alignment_objective(s, g, nullptr);
}

}  // namespace d2t
