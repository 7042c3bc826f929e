#pragma once

// Image and trajectory metrics, and test-view pose localization against a
// frozen cloud.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <vector>

#include "d2t/core_geometry.hpp"
#include "d2t/errors.hpp"
#include "d2t/optimizer.hpp"
#include "d2t/splat_renderer.hpp"
#include "d2t/ssim.hpp"

namespace d2t {

// Camera-to-world poses, in capture order.
using Trajectory = std::vector<Pose>;

struct Similarity {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return scale * rotation * x + translation; }
};

inline std::vector<Vec3> trajectory_centers(const Trajectory& t) {
  std::vector<Vec3> c;
  c.reserve(t.size());
  for (const auto& p : t) c.push_back(p.translation);
  return c;
}

// Least-squares similarity mapping src onto dst.
inline Similarity umeyama(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  if (src.size() != dst.size()) throw ValidationError("umeyama: point counts differ");
  if (src.size() < 2) throw DegenerateGeometryError("umeyama: need at least two points");
  const double n = static_cast<double>(src.size());
  Vec3 ms = Vec3::Zero(), md = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    ms += src[i];
    md += dst[i];
  }
  ms /= n;
  md /= n;
  Mat3 cov = Mat3::Zero();
  double var = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    cov += (dst[i] - md) * (src[i] - ms).transpose();
    var += (src[i] - ms).squaredNorm();
  }
  cov /= n;
  var /= n;
  if (!(var > 0.0)) throw DegenerateGeometryError("umeyama: source points coincide");
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  const double tol = 1e-12 * std::max(1.0, sv[0]);
  const int rank = (sv.array() > tol).count();
  const bool pair = src.size() == 2;
  if (!(sv[0] > tol) || (rank < 2 && !pair)) {
    throw DegenerateGeometryError("umeyama: rank-deficient covariance");
  }
  Mat3 s = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2, 2) = -1.0;
  Similarity out;
  out.rotation = svd.matrixU() * s * svd.matrixV().transpose();
  out.scale = (sv.asDiagonal() * s).trace() / var;
  out.translation = md - out.scale * out.rotation * ms;
  return out;
}

// Similarity taking the estimated camera centers onto the ground-truth ones.
inline Similarity umeyama_align(const Trajectory& est, const Trajectory& gt) {
  return umeyama(trajectory_centers(est), trajectory_centers(gt));
}

inline Trajectory to_camera_to_world(const std::vector<Pose>& world_to_camera) {
  Trajectory t;
  t.reserve(world_to_camera.size());
  for (const auto& p : world_to_camera) t.push_back(p.inverse());
  return t;
}

struct PoseMetrics {
  double ate_rmse = 0.0;
  double rpe_trans = 0.0;  // x100
  double rpe_rot = 0.0;    // degrees
};

inline PoseMetrics pose_metrics(const Trajectory& est, const Trajectory& gt) {
  if (est.size() != gt.size()) throw ValidationError("pose_metrics: trajectory lengths differ");
  if (est.size() < 2) throw ValidationError("pose_metrics: need at least two poses");
  const Similarity sim = umeyama_align(est, gt);
  Trajectory aligned;
  for (const auto& p : est) aligned.emplace_back(sim.rotation * p.rotation, sim.apply(p.translation));
  PoseMetrics m;
  double se = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) se += (aligned[i].translation - gt[i].translation).squaredNorm();
  m.ate_rmse = std::sqrt(se / static_cast<double>(est.size()));
  double rt = 0.0, rr = 0.0;
  for (std::size_t i = 0; i + 1 < est.size(); ++i) {
    const Pose de = aligned[i].inverse() * aligned[i + 1];
    const Pose dg = gt[i].inverse() * gt[i + 1];
    const Pose err = dg.inverse() * de;
    rt += err.translation.norm();
    rr += rotation_angle(err.rotation, Mat3::Identity());
  }
  const double pairs = static_cast<double>(est.size() - 1);
  m.rpe_trans = 100.0 * rt / pairs;
  m.rpe_rot = rr / pairs * 180.0 / M_PI;
  return m;
}

// 10 log10(1 / MSE); +inf for identical images.
inline double psnr(const ColorImage& a, const ColorImage& b) {
  if (!a.same_shape(b)) throw ValidationError("psnr: image sizes differ");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]).squaredNorm();
  const double mse = se / (3.0 * static_cast<double>(a.size()));
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

struct LocalizeConfig {
  int steps = 200;
  double lr = 1e-2;
  double lr_final = 1e-3;
  double lambda = 0.1;
  double translation_scale = 1.0;  // multiplies lr for the translation part
  RenderConfig render;
};

struct LocalizeResult {
  Pose pose;
  double loss = 0.0;
  std::vector<double> trace;
};

// Adam on a left se(3) perturbation, cloud frozen. Returns the best iterate.
inline LocalizeResult localize_test_view(const GaussianCloud& cloud, const ColorImage& image, const Pose& init,
                                         const CameraIntrinsics& intr, const LocalizeConfig& cfg = {}) {
  LocalizeResult best;
  best.pose = init;
  best.loss = std::numeric_limits<double>::infinity();
  if (cfg.steps <= 0) return best;
  detail::Adam adam;
  detail::AdamMoments mom;
  mom.ensure(6);
  Pose pose = init;
  for (int k = 0; k <= cfg.steps; ++k) {
    SplatRenderPass pass(cloud, pose, intr, cfg.render);
    auto l = loss_rgb(pass.output().color, image, cfg.lambda, k < cfg.steps);
    best.trace.push_back(l.value);
    if (!std::isfinite(l.value)) break;
    if (l.value < best.loss) {
      best.loss = l.value;
      best.pose = pose;
    }
    if (k == cfg.steps) break;
    RenderAdjoint adj(intr.width, intr.height);
    adj.color = std::move(l.grad);
    CloudGradient unused;
    Vec6 g = Vec6::Zero();
    pass.accumulate(adj, unused, g);
    const double lr = detail::log_lerp(cfg.lr, cfg.lr_final, static_cast<double>(k) / std::max(1, cfg.steps - 1));
    Vec6 delta;
    for (int c = 0; c < 6; ++c) {
      delta[c] = adam.step(mom, static_cast<std::size_t>(c), g[c], c < 3 ? lr : lr * cfg.translation_scale, k + 1);
    }
    pose = perturb_left(pose, delta);
  }
  return best;
}

}  // namespace d2t
