#pragma once

// Photometric and depth losses and the two-stage joint optimization of the
// Gaussian cloud and per-view camera poses.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "d2t/core_geometry.hpp"
#include "d2t/errors.hpp"
#include "d2t/splat_renderer.hpp"
#include "d2t/ssim.hpp"

namespace d2t {

struct LossWeights {
  double lambda = 0.1;         // D-SSIM mix
  double lambda_depth = 0.5;   // depth term in the coarse objective
  double lambda_pseudo = 0.3;  // synthesized-view term in the fine objective

  void validate() const {
    for (double v : {lambda, lambda_depth, lambda_pseudo}) {
      if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("LossWeights: every weight must lie in [0, 1]");
    }
  }
};

struct LossValue {
  double value = 0.0;
  Grid<Vec3> grad;  // d(value) / d(rendered)
};

// (1 - lambda) * mean|r - t| + lambda * (1 - SSIM(r, t)) / 2
inline LossValue loss_rgb(const ColorImage& rendered, const ColorImage& target, double lambda,
                          bool with_grad = true) {
  if (!rendered.same_shape(target)) throw ValidationError("loss_rgb: image sizes differ");
  const std::size_t n = rendered.size();
  const double inv = 1.0 / (3.0 * static_cast<double>(n));
  LossValue out;
  if (with_grad) out.grad = Grid<Vec3>(rendered.width(), rendered.height(), Vec3::Zero());
  double l1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double d = rendered[i][c] - target[i][c];
      l1 += std::abs(d);
      if (with_grad) out.grad[i][c] = (1.0 - lambda) * inv * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
    }
  }
  l1 *= inv;
  out.value = (1.0 - lambda) * l1;
  if (lambda != 0.0) {
    Grid<Vec3> gs;
    const double s = ssim(rendered, target, with_grad ? &gs : nullptr);
    out.value += lambda * 0.5 * (1.0 - s);
    if (with_grad) {
      for (std::size_t i = 0; i < n; ++i) out.grad[i] -= 0.5 * lambda * gs[i];
    }
  }
  return out;
}

struct DepthLossValue {
  double value = 1.0;
  ScalarMap grad;  // d(value) / d(rendered depth)
  std::size_t valid_pixels = 0;
  bool degenerate = false;
};

// 1 - Pearson(1 / depth, mono) over pixels whose alpha exceeds alpha_min.
inline DepthLossValue loss_depth(const ScalarMap& rendered_depth, const ScalarMap& mono,
                                 const ScalarMap* alpha = nullptr, double alpha_min = 0.5) {
  if (!rendered_depth.same_shape(mono) || (alpha && !alpha->same_shape(mono))) {
    throw ValidationError("loss_depth: map sizes differ");
  }
  const std::size_t n = mono.size();
  DepthLossValue out;
  out.grad = ScalarMap(mono.width(), mono.height(), 0.0);
  std::vector<std::size_t> idx;
  idx.reserve(n);
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (alpha && !((*alpha)[i] > alpha_min)) continue;
    const double d = rendered_depth[i];
    if (!(d > 0.0) || !std::isfinite(d) || !std::isfinite(mono[i])) continue;
    idx.push_back(i);
    sx += 1.0 / d;
    sy += mono[i];
  }
  out.valid_pixels = idx.size();
  if (idx.size() < 2) {
    out.degenerate = true;
    return out;
  }
  const double m = static_cast<double>(idx.size());
  const double mx = sx / m, my = sy / m;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i : idx) {
    const double dx = 1.0 / rendered_depth[i] - mx, dy = mono[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  const double tiny = 1e-300;
  if (!(sxx > tiny) || !(syy > tiny)) {
    out.degenerate = true;
    return out;
  }
  const double den = std::sqrt(sxx * syy);
  const double rho = sxy / den;
  out.value = 1.0 - rho;
  for (std::size_t i : idx) {
    const double d = rendered_depth[i];
    const double dx = 1.0 / d - mx, dy = mono[i] - my;
    const double drho_dx = dy / den - rho * dx / sxx;
    // d(1 - rho)/dD = -drho/dX * dX/dD, with dX/dD = -1/D^2
    out.grad[i] = drho_dx / (d * d);
  }
  return out;
}

struct LearningRates {
  double position = 1.6e-4;  // multiplied by the scene extent
  double position_final = 1.6e-6;
  double color = 2.5e-3;
  double opacity = 0.05;
  double scale = 5e-3;
  double rotation = 1e-3;
  double pose = 1e-3;  // translation part is multiplied by the scene extent
  double pose_final = 1e-4;
};

struct Schedule {
  int coarse_steps = 300;
  int fine_steps = 1700;
  LearningRates lr;
  bool optimize_fine_poses = true;

  void validate() const {
    if (coarse_steps <= 0 || fine_steps <= 0) throw ValidationError("Schedule: step counts must be positive");
  }
};

struct TraceRecord {
  int step = 0;  // global step index across both stages
  std::string stage;
  int view = 0;
  int novel = -1;
  double loss_rgb = 0.0;
  double loss_depth = 0.0;
  double loss_train = 0.0;  // loss_rgb + lambda_depth * loss_depth
  double loss_pseudo = 0.0;
  double loss_total = 0.0;
};

namespace detail {

struct AdamMoments {
  std::vector<double> m, v;
  void ensure(std::size_t n) {
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
  }
};

struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;

  // Returns the step to add to the parameter for gradient g at slot i.
  double step(AdamMoments& s, std::size_t i, double g, double lr, long t) const {
    s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
    s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
    const double mh = s.m[i] / (1.0 - std::pow(beta1, static_cast<double>(t)));
    const double vh = s.v[i] / (1.0 - std::pow(beta2, static_cast<double>(t)));
    return -lr * mh / (std::sqrt(vh) + eps);
  }
};

inline double log_lerp(double a, double b, double frac) {
  frac = std::clamp(frac, 0.0, 1.0);
  return std::exp(std::log(a) * (1.0 - frac) + std::log(b) * frac);
}

}  // namespace detail

// Everything the optimizer carries from one step, or stage, to the next.
struct TrainerState {
  GaussianCloud cloud;
  std::vector<Pose> poses;
  double scene_extent = 1.0;
  long step = 0;
  detail::AdamMoments m_position, m_scale, m_rotation, m_opacity, m_color;
  std::vector<detail::AdamMoments> m_pose;
  std::vector<long> pose_steps;
  std::vector<TraceRecord> trace;
};

// Radius of the camera centers around their mean, padded by 10%.
inline double camera_extent(const std::vector<Pose>& poses) {
  Vec3 mean = Vec3::Zero();
  for (const auto& p : poses) mean += p.center();
  mean /= static_cast<double>(poses.size());
  double r = 0.0;
  for (const auto& p : poses) r = std::max(r, (p.center() - mean).norm());
  return r > 0.0 ? 1.1 * r : 1.0;
}

struct TrainingView {
  ColorImage image;
  ScalarMap mono;  // empty grid disables the depth term for this view
};

struct PseudoView {
  ColorImage image;
  Pose pose;
};

struct StageConfig {
  LossWeights weights;
  Schedule schedule;
  RenderConfig render;
  CameraIntrinsics intrinsics;
  std::function<void(const TraceRecord&)> on_step;
};

namespace detail {

inline std::vector<double> loss_history(const TrainerState& s) {
  std::vector<double> out;
  out.reserve(s.trace.size());
  for (const auto& r : s.trace) out.push_back(r.loss_total);
  return out;
}

inline void apply_cloud_update(TrainerState& s, const CloudGradient& g, const LearningRates& lr,
                               int total_steps) {
  const Adam adam;
  const std::size_t n = s.cloud.size();
  s.m_position.ensure(3 * n);
  s.m_scale.ensure(3 * n);
  s.m_rotation.ensure(4 * n);
  s.m_opacity.ensure(n);
  s.m_color.ensure(3 * n);
  const long t = s.step + 1;
  const double frac = static_cast<double>(s.step) / std::max(1, total_steps);
  const double lr_pos = s.scene_extent * log_lerp(lr.position, lr.position_final, frac);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      s.cloud.position[i][c] += adam.step(s.m_position, 3 * i + c, g.position[i][c], lr_pos, t);
      s.cloud.log_scale[i][c] += adam.step(s.m_scale, 3 * i + c, g.log_scale[i][c], lr.scale, t);
      s.cloud.color[i][c] += adam.step(s.m_color, 3 * i + c, g.color[i][c], lr.color, t);
    }
    for (int c = 0; c < 4; ++c) {
      s.cloud.rotation[i][c] += adam.step(s.m_rotation, 4 * i + c, g.rotation[i][c], lr.rotation, t);
    }
    s.cloud.opacity_logit[i] += adam.step(s.m_opacity, i, g.opacity_logit[i], lr.opacity, t);
  }
  s.cloud.enforce_invariants();
}

inline void apply_pose_update(TrainerState& s, int view, const Vec6& g, double lr) {
  const Adam adam;
  auto& m = s.m_pose[static_cast<std::size_t>(view)];
  m.ensure(6);
  const long t = ++s.pose_steps[static_cast<std::size_t>(view)];
  Vec6 delta;
  for (int c = 0; c < 6; ++c) {
    const double lr_c = c < 3 ? lr : lr * s.scene_extent;
    delta[c] = adam.step(m, static_cast<std::size_t>(c), g[c], lr_c, t);
  }
  auto& pose = s.poses[static_cast<std::size_t>(view)];
  pose = perturb_left(pose, delta);
}

struct StepLoss {
  double rgb = 0.0, depth = 0.0;
};

inline StepLoss train_view_gradient(const TrainerState& s, const TrainingView& tv, const Pose& pose,
                                    const StageConfig& cfg, CloudGradient& g, Vec6& pose_grad) {
  SplatRenderPass pass(s.cloud, pose, cfg.intrinsics, cfg.render);
  const auto& out = pass.output();
  RenderAdjoint adj(cfg.intrinsics.width, cfg.intrinsics.height);
  StepLoss loss;
  auto rgb = loss_rgb(out.color, tv.image, cfg.weights.lambda);
  loss.rgb = rgb.value;
  adj.color = std::move(rgb.grad);
  if (cfg.weights.lambda_depth > 0.0 && !tv.mono.empty()) {
    auto dl = loss_depth(out.depth, tv.mono, &out.alpha);
    loss.depth = dl.value;
    for (std::size_t i = 0; i < dl.grad.size(); ++i) adj.depth[i] = cfg.weights.lambda_depth * dl.grad[i];
  }
  pass.accumulate(adj, g, pose_grad);
  return loss;
}

inline double pseudo_view_gradient(const TrainerState& s, const PseudoView& pv, const StageConfig& cfg,
                                   CloudGradient& g) {
  SplatRenderPass pass(s.cloud, pv.pose, cfg.intrinsics, cfg.render);
  auto rgb = loss_rgb(pass.output().color, pv.image, cfg.weights.lambda);
  RenderAdjoint adj(cfg.intrinsics.width, cfg.intrinsics.height);
  for (std::size_t i = 0; i < rgb.grad.size(); ++i) adj.color[i] = cfg.weights.lambda_pseudo * rgb.grad[i];
  Vec6 unused = Vec6::Zero();
  pass.accumulate(adj, g, unused);
  return rgb.value;
}

inline void run_stage(TrainerState& s, const std::vector<TrainingView>& views,
                      const std::vector<PseudoView>* pseudo, int steps, const StageConfig& cfg,
                      const std::string& stage, bool optimize_poses) {
  if (views.size() != s.poses.size()) throw ValidationError(stage + ": one pose per training view required");
  if (views.empty()) throw ValidationError(stage + ": no training views");
  for (const auto& v : views) {
    if (!v.image.same_shape(cfg.intrinsics.width, cfg.intrinsics.height) ||
        (!v.mono.empty() && !v.mono.same_shape(v.image))) {
      throw ValidationError(stage + ": training image or mono-depth size does not match the camera");
    }
  }
  if (s.m_pose.size() != s.poses.size()) {
    s.m_pose.assign(s.poses.size(), AdamMoments{});
    s.pose_steps.assign(s.poses.size(), 0);
  }
  const int total = cfg.schedule.coarse_steps + cfg.schedule.fine_steps;
  const auto& lr = cfg.schedule.lr;
  for (int k = 0; k < steps; ++k) {
    const int view = k % static_cast<int>(views.size());
    CloudGradient g(s.cloud.size());
    Vec6 pose_grad = Vec6::Zero();
    TraceRecord rec;
    rec.step = static_cast<int>(s.step);
    rec.stage = stage;
    rec.view = view;
    const StepLoss tl =
        train_view_gradient(s, views[static_cast<std::size_t>(view)], s.poses[static_cast<std::size_t>(view)], cfg, g, pose_grad);
    rec.loss_rgb = tl.rgb;
    rec.loss_depth = tl.depth;
    rec.loss_train = tl.rgb + cfg.weights.lambda_depth * tl.depth;
    rec.loss_total = rec.loss_train;
    if (pseudo && !pseudo->empty() && cfg.weights.lambda_pseudo > 0.0) {
      rec.novel = k % static_cast<int>(pseudo->size());
      rec.loss_pseudo = pseudo_view_gradient(s, (*pseudo)[static_cast<std::size_t>(rec.novel)], cfg, g);
      rec.loss_total += cfg.weights.lambda_pseudo * rec.loss_pseudo;
    }
    s.trace.push_back(rec);
    if (!std::isfinite(rec.loss_total)) {
      throw OptimizationFailure(stage + ": non-finite loss at step " + std::to_string(rec.step), loss_history(s));
    }
    apply_cloud_update(s, g, lr, total);
    if (optimize_poses) {
      apply_pose_update(s, view, pose_grad, log_lerp(lr.pose, lr.pose_final, static_cast<double>(k) / std::max(1, steps - 1)));
    }
    ++s.step;
    if (cfg.on_step) cfg.on_step(rec);
  }
}

}  // namespace detail

// k1 steps over the training views, round robin. Each step updates the cloud
// and the pose of the view it rendered.
inline void coarse_stage(TrainerState& state, const std::vector<TrainingView>& views, const StageConfig& cfg) {
  cfg.weights.validate();
  cfg.schedule.validate();
  detail::run_stage(state, views, nullptr, cfg.schedule.coarse_steps, cfg, "coarse", true);
}

// K2 steps; each pairs one training view with one synthesized view. Poses of
// synthesized views stay fixed.
inline void fine_stage(TrainerState& state, const std::vector<TrainingView>& views,
                       const std::vector<PseudoView>& pseudo, const StageConfig& cfg) {
  cfg.weights.validate();
  cfg.schedule.validate();
  if (pseudo.empty()) throw ValidationError("fine: synthesized set is empty");
  for (const auto& p : pseudo) {
    if (!p.image.same_shape(cfg.intrinsics.width, cfg.intrinsics.height)) {
      throw ValidationError("fine: synthesized image size does not match the camera");
    }
  }
  detail::run_stage(state, views, &pseudo, cfg.schedule.fine_steps, cfg, "fine", cfg.schedule.optimize_fine_poses);
}

// Mean loss_train over consecutive windows of `window` steps; a trailing
// partial window is dropped.
inline std::vector<double> windowed_loss(const std::vector<TraceRecord>& trace, int window) {
  std::vector<double> out;
  for (std::size_t b = 0; b + static_cast<std::size_t>(window) <= trace.size(); b += static_cast<std::size_t>(window)) {
    double s = 0.0;
    for (std::size_t i = b; i < b + static_cast<std::size_t>(window); ++i) s += trace[i].loss_train;
    out.push_back(s / window);
  }
  return out;
}

}  // namespace d2t
