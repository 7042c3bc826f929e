#pragma once

// CPU anisotropic Gaussian splatting with analytic reverse-mode gradients.
//
// Forward model per pixel, Gaussians sorted front to back by camera z:
//   alpha_k = sigmoid(o_k) * K(m2_k),   m2_k = d^T cov2d_k^{-1} d
//   C = sum_k c_k alpha_k T_k,   D = sum_k z_k alpha_k T_k,   A = sum_k alpha_k T_k
// with T_k = prod_{j<k} (1 - alpha_j). K is exp(-m2/2) truncated at m2 = 9
// (3 sigma) with a linear correction that makes the kernel and its first
// derivative vanish at the cutoff, so gradients stay continuous.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "d2t/core_geometry.hpp"
#include "d2t/errors.hpp"

namespace d2t {

using Quat = Eigen::Vector4d;  // (w, x, y, z)

struct GaussianCloud {
  std::vector<Vec3> position;
  std::vector<Vec3> log_scale;
  std::vector<Quat> rotation;
  std::vector<double> opacity_logit;
  std::vector<Vec3> color;

  std::size_t size() const { return position.size(); }

  void resize(std::size_t n) {
    position.resize(n, Vec3::Zero());
    log_scale.resize(n, Vec3::Zero());
    rotation.resize(n, Quat(1.0, 0.0, 0.0, 0.0));
    opacity_logit.resize(n, 0.0);
    color.resize(n, Vec3::Zero());
  }

  void push_back(const Vec3& p, const Vec3& ls, const Quat& q, double o, const Vec3& c) {
    position.push_back(p);
    log_scale.push_back(ls);
    rotation.push_back(q);
    opacity_logit.push_back(o);
    color.push_back(c);
  }

  // Restores the unit-quaternion and [0, 1] color invariants after an update.
  void enforce_invariants() {
    for (auto& q : rotation) {
      const double n = q.norm();
      q = n > 0.0 ? Quat(q / n) : Quat(1.0, 0.0, 0.0, 0.0);
    }
    for (auto& c : color) c = c.cwiseMax(0.0).cwiseMin(1.0);
  }

  bool operator==(const GaussianCloud&) const = default;
};

struct CloudGradient {
  std::vector<Vec3> position;
  std::vector<Vec3> log_scale;
  std::vector<Quat> rotation;
  std::vector<double> opacity_logit;
  std::vector<Vec3> color;

  explicit CloudGradient(std::size_t n = 0)
      : position(n, Vec3::Zero()),
        log_scale(n, Vec3::Zero()),
        rotation(n, Quat::Zero()),
        opacity_logit(n, 0.0),
        color(n, Vec3::Zero()) {}

  std::size_t size() const { return position.size(); }

  CloudGradient& operator+=(const CloudGradient& o) {
    for (std::size_t i = 0; i < size(); ++i) {
      position[i] += o.position[i];
      log_scale[i] += o.log_scale[i];
      rotation[i] += o.rotation[i];
      opacity_logit[i] += o.opacity_logit[i];
      color[i] += o.color[i];
    }
    return *this;
  }

  CloudGradient& operator*=(double s) {
    for (std::size_t i = 0; i < size(); ++i) {
      position[i] *= s;
      log_scale[i] *= s;
      rotation[i] *= s;
      opacity_logit[i] *= s;
      color[i] *= s;
    }
    return *this;
  }
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline Mat3 quat_to_rotation(const Quat& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

struct InitConfig {
  std::size_t max_points = 0;  // 0 keeps every point
  double initial_opacity = 0.1;
  int neighbors = 3;
  double lone_point_scale = 0.01;  // used when a cloud has a single point
};

// One isotropic Gaussian per point; scale is the mean distance to the nearest
// `neighbors` points (fewer when the cloud is smaller).
inline GaussianCloud init_from_points(const std::vector<Vec3>& points, const std::vector<Vec3>& colors,
                                      const InitConfig& cfg = {}) {
  if (points.empty()) throw ValidationError("init_from_points: empty point list");
  if (colors.size() != points.size()) throw ValidationError("init_from_points: colors/points mismatch");
  std::vector<std::size_t> keep;
  const std::size_t n = points.size();
  if (cfg.max_points > 0 && n > cfg.max_points) {
    for (std::size_t k = 0; k < cfg.max_points; ++k) keep.push_back(k * n / cfg.max_points);
  } else {
    keep.resize(n);
    std::iota(keep.begin(), keep.end(), std::size_t{0});
  }
  const std::size_t m = keep.size();
  const int k = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(cfg.neighbors), m - 1));

  GaussianCloud cloud;
  const double o = logit(cfg.initial_opacity);
  std::vector<double> best;
  for (std::size_t a = 0; a < m; ++a) {
    const Vec3& pa = points[keep[a]];
    double scale = cfg.lone_point_scale;
    if (k > 0) {
      best.assign(static_cast<std::size_t>(k), std::numeric_limits<double>::infinity());
      for (std::size_t b = 0; b < m; ++b) {
        if (a == b) continue;
        const double d2 = (points[keep[b]] - pa).squaredNorm();
        if (d2 < best.back()) {
          best.back() = d2;
          std::sort(best.begin(), best.end());
        }
      }
      double sum = 0.0;
      for (double d2 : best) sum += std::sqrt(d2);
      scale = std::max(sum / k, 1e-7);
    }
    cloud.push_back(pa, Vec3::Constant(std::log(scale)), Quat(1.0, 0.0, 0.0, 0.0), o,
                    ColorImage::clamp(colors[keep[a]]));
  }
  return cloud;
}

struct RenderConfig {
  double near_plane = 0.01;
  double dilation = 0.3;  // px^2 added to the projected covariance diagonal
  bool normalize_depth = true;  // divide the depth composite by accumulated alpha
};

struct RenderOutput {
  ColorImage color;
  ScalarMap depth;  // NaN where alpha <= 1e-4
  ScalarMap alpha;
};

struct RenderAdjoint {
  Grid<Vec3> color;
  ScalarMap depth;
  ScalarMap alpha;

  RenderAdjoint() = default;
  RenderAdjoint(int w, int h) : color(w, h, Vec3::Zero()), depth(w, h, 0.0), alpha(w, h, 0.0) {}
};

struct RenderGradients {
  CloudGradient cloud;
  Vec6 pose = Vec6::Zero();  // left se(3) perturbation: (rotation, translation)
  RenderOutput output;
};

inline constexpr double kDepthAlphaFloor = 1e-4;

namespace detail {

inline constexpr double kCutoff = 9.0;

inline double kernel_tail() { return std::exp(-0.5 * kCutoff); }
inline double kernel_norm() { return 1.0 - kernel_tail() * (1.0 + 0.5 * kCutoff); }

inline double splat_kernel(double m2) {
  const double e = kernel_tail();
  return (std::exp(-0.5 * m2) - e * (1.0 + 0.5 * (kCutoff - m2))) / kernel_norm();
}

inline double splat_kernel_deriv(double m2) {
  return 0.5 * (kernel_tail() - std::exp(-0.5 * m2)) / kernel_norm();
}

struct Projected {
  std::uint32_t index;
  Vec3 cam;
  Mat3 world_cov;
  Eigen::Matrix<double, 2, 3> jac;
  Eigen::Matrix2d conic;
  Vec2 mean;
  double opacity;
  int x0, x1, y0, y1;
};

struct Fragment {
  std::uint32_t pixel;
  std::uint32_t splat;  // position in the sorted Projected list
  double alpha;
  double transmittance;
  double dx, dy;
  double m2;
};

class Rasterizer {
 public:
  Rasterizer(const GaussianCloud& cloud, const Pose& pose, const CameraIntrinsics& intr,
             const RenderConfig& cfg)
      : cloud_(cloud), pose_(pose), intr_(intr), cfg_(cfg) {}

  RenderOutput forward(bool keep_fragments) {
    project_all();
    const int w = intr_.width, h = intr_.height;
    const std::size_t npx = static_cast<std::size_t>(w) * h;
    std::vector<double> trans(npx, 1.0);
    Grid<Vec3> color(w, h, Vec3::Zero());
    raw_depth_ = ScalarMap(w, h, 0.0);
    raw_alpha_ = ScalarMap(w, h, 0.0);
    fragments_.clear();
    for (std::size_t s = 0; s < splats_.size(); ++s) {
      const Projected& g = splats_[s];
      const Vec3& c = cloud_.color[g.index];
      for (int y = g.y0; y <= g.y1; ++y) {
        for (int x = g.x0; x <= g.x1; ++x) {
          const double dx = x - g.mean.x(), dy = y - g.mean.y();
          const double m2 = g.conic(0, 0) * dx * dx + 2.0 * g.conic(0, 1) * dx * dy + g.conic(1, 1) * dy * dy;
          if (!(m2 < kCutoff)) continue;
          const double a = g.opacity * splat_kernel(m2);
          if (!(a > 0.0)) continue;
          const std::size_t p = static_cast<std::size_t>(y) * w + x;
          const double t = trans[p];
          const double wgt = a * t;
          color[p] += wgt * c;
          raw_depth_[p] += wgt * g.cam.z();
          raw_alpha_[p] += wgt;
          trans[p] = t * (1.0 - a);
          if (keep_fragments) {
            fragments_.push_back({static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(s), a, t, dx, dy, m2});
          }
        }
      }
    }
    RenderOutput out;
    out.color = ColorImage(w, h, std::move(color.data()));
    out.alpha = raw_alpha_;
    out.depth = ScalarMap(w, h);
    for (std::size_t p = 0; p < npx; ++p) {
      const double a = raw_alpha_[p];
      if (!(a > kDepthAlphaFloor)) {
        out.depth[p] = invalid_depth();
      } else {
        out.depth[p] = cfg_.normalize_depth ? raw_depth_[p] / a : raw_depth_[p];
      }
    }
    return out;
  }

  // Requires forward(true) first.
  void backward(const RenderAdjoint& adj, CloudGradient& grad, Vec6& pose_grad) const {
    const int w = intr_.width, h = intr_.height;
    const std::size_t npx = static_cast<std::size_t>(w) * h;
    // Depth adjoints are only defined where the output depth is.
    ScalarMap ad(w, h, 0.0), aa = adj.alpha;
    for (std::size_t p = 0; p < npx; ++p) {
      const double a = raw_alpha_[p];
      if (!(a > kDepthAlphaFloor)) continue;
      const double g = adj.depth[p];
      if (g == 0.0) continue;
      if (cfg_.normalize_depth) {
        ad[p] = g / a;
        aa[p] -= g * raw_depth_[p] / (a * a);
      } else {
        ad[p] = g;
      }
    }

    const std::size_t ns = splats_.size();
    std::vector<Vec2> g_mean(ns, Vec2::Zero());
    std::vector<Eigen::Matrix2d> g_conic(ns, Eigen::Matrix2d::Zero());
    std::vector<double> g_z(ns, 0.0), g_opacity(ns, 0.0);
    std::vector<Vec3> g_color(ns, Vec3::Zero());

    // Suffix composites (r, g, b, z, alpha) behind the current fragment.
    std::vector<Eigen::Matrix<double, 5, 1>> suffix(npx, Eigen::Matrix<double, 5, 1>::Zero());
    for (std::size_t f = fragments_.size(); f-- > 0;) {
      const Fragment& fr = fragments_[f];
      const Projected& g = splats_[fr.splat];
      const std::size_t p = fr.pixel;
      Eigen::Matrix<double, 5, 1> v;
      const Vec3& c = cloud_.color[g.index];
      v << c.x(), c.y(), c.z(), g.cam.z(), 1.0;
      Eigen::Matrix<double, 5, 1> up;
      up << adj.color[p].x(), adj.color[p].y(), adj.color[p].z(), ad[p], aa[p];

      const double wgt = fr.alpha * fr.transmittance;
      g_color[fr.splat] += wgt * up.head<3>();
      g_z[fr.splat] += wgt * up[3];
      const double d_alpha = fr.transmittance * up.dot(v - suffix[p]);
      suffix[p] = fr.alpha * v + (1.0 - fr.alpha) * suffix[p];

      const double k = splat_kernel(fr.m2);
      const double sig = g.opacity;
      g_opacity[fr.splat] += d_alpha * k * sig * (1.0 - sig);
      const double d_m2 = d_alpha * sig * splat_kernel_deriv(fr.m2);
      const Vec2 d(fr.dx, fr.dy);
      g_mean[fr.splat] -= d_m2 * 2.0 * (g.conic * d);
      g_conic[fr.splat] += d_m2 * (d * d.transpose());
    }

    const double fcl = intr_.focal;
    const Mat3& wrot = pose_.rotation;
    for (std::size_t s = 0; s < ns; ++s) {
      const Projected& g = splats_[s];
      const std::uint32_t i = g.index;
      grad.color[i] += g_color[s];
      grad.opacity_logit[i] += g_opacity[s];

      const Eigen::Matrix2d g_cov = -g.conic * g_conic[s] * g.conic;
      const Eigen::Matrix<double, 2, 3> m = g.jac * wrot;
      const Eigen::Matrix<double, 2, 3> g_m = 2.0 * g_cov * m * g.world_cov;
      const Mat3 g_sigma = m.transpose() * g_cov * m;
      const Eigen::Matrix<double, 2, 3> g_j = g_m * wrot.transpose();
      const Mat3 g_w = g.jac.transpose() * g_m;

      const double x = g.cam.x(), y = g.cam.y(), z = g.cam.z();
      const double iz2 = 1.0 / (z * z), iz3 = iz2 / z;
      Vec3 g_p = g.jac.transpose() * g_mean[s];
      g_p.x() += g_j(0, 2) * (-fcl * iz2);
      g_p.y() += g_j(1, 2) * (-fcl * iz2);
      g_p.z() += (g_j(0, 0) + g_j(1, 1)) * (-fcl * iz2) + g_j(0, 2) * (2.0 * fcl * x * iz3) +
                 g_j(1, 2) * (2.0 * fcl * y * iz3) + g_z[s];

      grad.position[i] += wrot.transpose() * g_p;

      // Left perturbation acts on camera-frame points and on W.
      pose_grad.head<3>() += g.cam.cross(g_p);
      pose_grad.tail<3>() += g_p;
      const Mat3 a = g_w * wrot.transpose();
      pose_grad[0] += a(2, 1) - a(1, 2);
      pose_grad[1] += a(0, 2) - a(2, 0);
      pose_grad[2] += a(1, 0) - a(0, 1);

      // Sigma = R S^2 R^T
      const Quat& qraw = cloud_.rotation[i];
      const double qn = qraw.norm();
      const Quat q = qraw / qn;
      const Mat3 r = quat_to_rotation(q);
      const Vec3 s2 = (2.0 * cloud_.log_scale[i]).array().exp();
      for (int c = 0; c < 3; ++c) {
        grad.log_scale[i][c] += 2.0 * s2[c] * r.col(c).dot(g_sigma * r.col(c));
      }
      const Mat3 g_r = 2.0 * g_sigma * r * s2.asDiagonal();
      const double qw = q[0], qx = q[1], qy = q[2], qz = q[3];
      Mat3 dw, dx, dy, dz;
      dw << 0, -qz, qy, qz, 0, -qx, -qy, qx, 0;
      dx << 0, qy, qz, qy, -2 * qx, -qw, qz, qw, -2 * qx;
      dy << -2 * qy, qx, qw, qx, 0, qz, -qw, qz, -2 * qy;
      dz << -2 * qz, -qw, qx, qw, -2 * qz, qy, qx, qy, 0;
      const Quat g_qhat(2.0 * (g_r.cwiseProduct(dw)).sum(), 2.0 * (g_r.cwiseProduct(dx)).sum(),
                        2.0 * (g_r.cwiseProduct(dy)).sum(), 2.0 * (g_r.cwiseProduct(dz)).sum());
      grad.rotation[i] += (g_qhat - q * q.dot(g_qhat)) / qn;
    }
  }

 private:
  void project_all() {
    splats_.clear();
    const Mat3& wrot = pose_.rotation;
    const double f = intr_.focal;
    for (std::size_t i = 0; i < cloud_.size(); ++i) {
      Projected g;
      g.index = static_cast<std::uint32_t>(i);
      g.cam = pose_.apply(cloud_.position[i]);
      const double z = g.cam.z();
      if (!(z > cfg_.near_plane)) continue;
      const Quat& q = cloud_.rotation[i];
      const Mat3 r = quat_to_rotation(q / q.norm());
      const Vec3 s2 = (2.0 * cloud_.log_scale[i]).array().exp();
      g.world_cov = r * s2.asDiagonal() * r.transpose();
      g.jac << f / z, 0.0, -f * g.cam.x() / (z * z), 0.0, f / z, -f * g.cam.y() / (z * z);
      const Eigen::Matrix<double, 2, 3> m = g.jac * wrot;
      Eigen::Matrix2d cov = m * g.world_cov * m.transpose();
      cov(0, 0) += cfg_.dilation;
      cov(1, 1) += cfg_.dilation;
      cov(0, 1) = cov(1, 0) = 0.5 * (cov(0, 1) + cov(1, 0));
      const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
      if (!(det > 0.0) || !std::isfinite(det)) continue;
      g.conic << cov(1, 1) / det, -cov(0, 1) / det, -cov(0, 1) / det, cov(0, 0) / det;
      g.mean = Vec2(f * g.cam.x() / z + intr_.cx(), f * g.cam.y() / z + intr_.cy());
      const double mid = 0.5 * (cov(0, 0) + cov(1, 1));
      const double lmax = mid + std::sqrt(std::max(0.0, mid * mid - det));
      const double rad = 3.0 * std::sqrt(lmax);
      const double bx0 = std::ceil(g.mean.x() - rad), bx1 = std::floor(g.mean.x() + rad);
      const double by0 = std::ceil(g.mean.y() - rad), by1 = std::floor(g.mean.y() + rad);
      if (!std::isfinite(bx0) || !std::isfinite(by0)) continue;
      g.x0 = static_cast<int>(std::max(0.0, bx0));
      g.x1 = static_cast<int>(std::min<double>(intr_.width - 1, bx1));
      g.y0 = static_cast<int>(std::max(0.0, by0));
      g.y1 = static_cast<int>(std::min<double>(intr_.height - 1, by1));
      if (g.x0 > g.x1 || g.y0 > g.y1) continue;
      g.opacity = sigmoid(cloud_.opacity_logit[i]);
      splats_.push_back(g);
    }
    std::sort(splats_.begin(), splats_.end(), [](const Projected& a, const Projected& b) {
      if (a.cam.z() != b.cam.z()) return a.cam.z() < b.cam.z();
      return a.index < b.index;
    });
  }

  const GaussianCloud& cloud_;
  Pose pose_;
  CameraIntrinsics intr_;
  RenderConfig cfg_;
  std::vector<Projected> splats_;
  std::vector<Fragment> fragments_;
  ScalarMap raw_depth_;
  ScalarMap raw_alpha_;
};

}  // namespace detail

inline RenderOutput render(const GaussianCloud& cloud, const Pose& pose, const CameraIntrinsics& intr,
                           const RenderConfig& cfg = {}) {
  detail::Rasterizer r(cloud, pose, intr, cfg);
  return r.forward(false);
}

// Forward render plus gradients of sum(adjoint * output) with respect to every
// cloud parameter and to a left se(3) perturbation of `pose`.
inline RenderGradients render_with_gradients(const GaussianCloud& cloud, const Pose& pose,
                                             const CameraIntrinsics& intr, const RenderAdjoint& adjoint,
                                             const RenderConfig& cfg = {}) {
  if (!adjoint.color.same_shape(intr.width, intr.height) || !adjoint.depth.same_shape(intr.width, intr.height) ||
      !adjoint.alpha.same_shape(intr.width, intr.height)) {
    throw ValidationError("render_with_gradients: adjoint size does not match the camera");
  }
  detail::Rasterizer r(cloud, pose, intr, cfg);
  RenderGradients out;
  out.output = r.forward(true);
  out.cloud = CloudGradient(cloud.size());
  r.backward(adjoint, out.cloud, out.pose);
  return out;
}

// Two-pass form for callers whose adjoint depends on the forward output.
class SplatRenderPass {
 public:
  SplatRenderPass(const GaussianCloud& cloud, const Pose& pose, const CameraIntrinsics& intr,
                  const RenderConfig& cfg = {})
      : raster_(cloud, pose, intr, cfg), size_(cloud.size()) {
    output_ = raster_.forward(true);
  }
  const RenderOutput& output() const { return output_; }

  void accumulate(const RenderAdjoint& adjoint, CloudGradient& grad, Vec6& pose_grad) const {
    if (grad.size() != size_) grad = CloudGradient(size_);
    raster_.backward(adjoint, grad, pose_grad);
  }

 private:
  detail::Rasterizer raster_;
  std::size_t size_;
  RenderOutput output_;
};

}  // namespace d2t
