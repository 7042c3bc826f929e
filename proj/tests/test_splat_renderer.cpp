#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"

using namespace d2t;

namespace {

GaussianCloud on_axis(double z, double log_scale, double opacity, const Vec3& color) {
  GaussianCloud c;
  c.push_back(Vec3(0.0, 0.0, z), Vec3::Constant(log_scale), Quat(1, 0, 0, 0), logit(opacity), color);
  return c;
}

}  // namespace

TEST(InitFromPoints, SinglePointAndNearestNeighbourScale) {
  const auto one = init_from_points({Vec3(1, 2, 3)}, {Vec3(0.1, 0.2, 0.3)});
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.position[0], Vec3(1, 2, 3));
  EXPECT_EQ(one.rotation[0], Quat(1, 0, 0, 0));
  EXPECT_NEAR(sigmoid(one.opacity_logit[0]), 0.1, 1e-12);

  const auto two = init_from_points({Vec3(0, 0, 0), Vec3(1, 0, 0)}, {Vec3::Zero(), Vec3::Zero()});
  for (std::size_t i = 0; i < 2; ++i)
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(two.log_scale[i][k], 0.0, 1e-12);

  // Mean distance to the three nearest neighbours.
  const auto four = init_from_points({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 2, 0), Vec3(0, 0, 3)},
                                     std::vector<Vec3>(4, Vec3::Zero()));
  EXPECT_NEAR(std::exp(four.log_scale[0][0]), 2.0, 1e-12);
  EXPECT_THROW(init_from_points({}, {}), ValidationError);
}

TEST(InitFromPoints, SubsampleCap) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<Vec3> pts, cols;
  for (int i = 0; i < 10000; ++i) {
    pts.emplace_back(u(rng), u(rng), u(rng));
    cols.emplace_back(0.5, 0.5, 0.5);
  }
  InitConfig cfg;
  cfg.max_points = 5000;
  EXPECT_EQ(init_from_points(pts, cols, cfg).size(), 5000u);
}

TEST(Render, EmptyCloudIsBackground) {
  const CameraIntrinsics intr(30.0, 16, 12);
  const auto out = render(GaussianCloud{}, Pose(), intr);
  for (std::size_t i = 0; i < out.color.size(); ++i) {
    EXPECT_EQ(out.color[i], Vec3::Zero());
    EXPECT_EQ(out.alpha[i], 0.0);
    EXPECT_TRUE(std::isnan(out.depth[i]));
  }
}

TEST(Render, SingleOpaqueGaussianOnAxis) {
  const CameraIntrinsics intr(30.0, 33, 33);
  for (bool normalize : {true, false}) {
    RenderConfig cfg;
    cfg.normalize_depth = normalize;
    const auto out = render(on_axis(2.0, std::log(0.05), 0.999, Vec3(1, 1, 1)), Pose(), intr, cfg);
    std::size_t best = 0;
    for (std::size_t i = 0; i < out.alpha.size(); ++i)
      if (out.alpha[i] > out.alpha[best]) best = i;
    EXPECT_EQ(best, out.alpha.index(16, 16));
    const double expected = normalize ? 2.0 : 2.0 * out.alpha(16, 16);
    EXPECT_NEAR(out.depth(16, 16), expected, 1e-3);
  }
}

TEST(Render, FrontGaussianOccludesBack) {
  const CameraIntrinsics intr(30.0, 33, 33);
  GaussianCloud c = on_axis(2.0, std::log(0.2), 0.9, Vec3(0, 0, 1));
  c.push_back(Vec3(0.0, 0.0, 1.0), Vec3::Constant(std::log(0.1)), Quat(1, 0, 0, 0), logit(0.999), Vec3(1, 0, 0));
  const auto out = render(c, Pose(), intr);
  EXPECT_GT(out.color(16, 16).x(), 0.9);
  EXPECT_LT(out.color(16, 16).z(), 0.05);
}

TEST(Render, BoundsAndDeterminism) {
  const auto c = oracle::random_renderer_case(3, 20);
  const auto a = render(c.cloud, c.pose, c.intr);
  const auto b = render(c.cloud, c.pose, c.intr);
  EXPECT_EQ(a.color, b.color);
  EXPECT_EQ(a.alpha, b.alpha);
  for (std::size_t i = 0; i < a.alpha.size(); ++i) {
    EXPECT_GE(a.alpha[i], 0.0);
    EXPECT_LE(a.alpha[i], 1.0);
    EXPECT_EQ(std::isfinite(a.depth[i]), a.alpha[i] > kDepthAlphaFloor);
    for (int k = 0; k < 3; ++k) {
      EXPECT_GE(a.color[i][k], 0.0);
      EXPECT_LE(a.color[i][k], 1.0);
    }
  }
}

TEST(Render, BehindNearPlaneIsCulled) {
  const CameraIntrinsics intr(30.0, 16, 16);
  const auto out = render(on_axis(-1.0, 0.0, 0.9, Vec3(1, 1, 1)), Pose(), intr);
  for (double a : out.alpha.data()) EXPECT_EQ(a, 0.0);
}

TEST(RenderGradients, ZeroAdjointGivesZeroGradients) {
  auto c = oracle::random_renderer_case(4);
  c.adjoint = RenderAdjoint(c.intr.width, c.intr.height);
  const auto g = render_with_gradients(c.cloud, c.pose, c.intr, c.adjoint);
  EXPECT_EQ(g.pose, Vec6::Zero());
  for (std::size_t i = 0; i < c.cloud.size(); ++i) {
    EXPECT_EQ(g.cloud.position[i], Vec3::Zero());
    EXPECT_EQ(g.cloud.color[i], Vec3::Zero());
    EXPECT_EQ(g.cloud.opacity_logit[i], 0.0);
  }
  EXPECT_THROW(render_with_gradients(c.cloud, c.pose, c.intr, RenderAdjoint(3, 3)), ValidationError);
}

TEST(RenderGradients, ColorGradientIsCompositingWeight) {
  const CameraIntrinsics intr(30.0, 17, 17);
  const GaussianCloud c = on_axis(2.0, std::log(0.2), 0.6, Vec3(0.3, 0.5, 0.7));
  RenderAdjoint adj(17, 17);
  adj.color(8, 8) = Vec3(1, 1, 1);
  const auto g = render_with_gradients(c, Pose(), intr, adj);
  // A single Gaussian's weight equals the accumulated alpha.
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(g.cloud.color[0][k], g.output.alpha(8, 8), 1e-12);
}

TEST(RenderGradients, MatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto c = oracle::random_renderer_case(100 + seed, 10);
    for (const auto& [group, err] : oracle::renderer_gradient_errors(c)) {
      EXPECT_LT(err, 1e-3) << "seed " << seed << " group " << group;
    }
  }
}

TEST(RenderGradients, UnnormalizedDepthAlsoMatches) {
  auto c = oracle::random_renderer_case(7, 10);
  RenderConfig cfg;
  cfg.normalize_depth = false;
  const auto g = render_with_gradients(c.cloud, c.pose, c.intr, c.adjoint, cfg);
  auto f = [&](const Pose& p) {
    const auto o = render(c.cloud, p, c.intr, cfg);
    double s = 0.0;
    for (std::size_t i = 0; i < o.color.size(); ++i) {
      s += c.adjoint.color[i].dot(o.color[i]) + c.adjoint.alpha[i] * o.alpha[i];
      if (std::isfinite(o.depth[i])) s += c.adjoint.depth[i] * o.depth[i];
    }
    return s;
  };
  Eigen::VectorXd a(6), b(6);
  for (int k = 0; k < 6; ++k) {
    a[k] = g.pose[k];
    b[k] = oracle::central_difference(
        [&](double x) {
          Vec6 d = Vec6::Zero();
          d[k] = x;
          return f(se3_exp(d) * c.pose);
        },
        0.0, 1e-5);
  }
  EXPECT_LT(oracle::relative_error(a, b), 1e-3);
}

TEST(RenderGradients, PoseFirstOrderRatio) {
  const auto c = oracle::random_renderer_case(8, 10);
  const auto g = render_with_gradients(c.cloud, c.pose, c.intr, c.adjoint);
  Vec6 dir;
  dir << 0.3, -0.2, 0.5, 0.4, 0.1, -0.3;
  const double f0 = oracle::adjoint_objective(c, c.cloud, c.pose);
  auto remainder = [&](double eps) {
    return std::abs(oracle::adjoint_objective(c, c.cloud, se3_exp(eps * dir) * c.pose) - f0 - eps * g.pose.dot(dir));
  };
  const double ratio = remainder(1e-3) / remainder(1e-4);
  EXPECT_GT(ratio, 30.0);  // second order: about 100
}

TEST(SplatRenderPass, MatchesOneShotGradients) {
  const auto c = oracle::random_renderer_case(9, 10);
  const auto g = render_with_gradients(c.cloud, c.pose, c.intr, c.adjoint);
  SplatRenderPass pass(c.cloud, c.pose, c.intr);
  EXPECT_EQ(pass.output().color, g.output.color);
  CloudGradient grad;
  Vec6 pg = Vec6::Zero();
  pass.accumulate(c.adjoint, grad, pg);
  EXPECT_EQ(pg, g.pose);
  EXPECT_EQ(grad.position, g.cloud.position);
}
