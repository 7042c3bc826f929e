#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"

using namespace d2t;
namespace fs = std::filesystem;

namespace {

double masked_psnr(const ColorImage& a, const ColorImage& b, const BinaryMask& m) {
  double se = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m[i]) continue;
    se += (a[i] - b[i]).squaredNorm();
    n += 3;
  }
  return 10.0 * std::log10(static_cast<double>(n) / se);
}

BinaryMask random_mask(int w, int h, std::mt19937_64& rng, double density) {
  std::bernoulli_distribution b(density);
  BinaryMask m(w, h, 0);
  for (auto& v : m.data()) v = b(rng) ? 1 : 0;
  return m;
}

}  // namespace

TEST(SampleNovelPoses, CountOrderAndEndpoints) {
  SyntheticSpec spec;
  spec.n_views = 4;
  const auto scene = make_box_room(spec);
  const auto set = sample_novel_poses(scene.gt.views, 3);
  ASSERT_EQ(set.poses.size(), 9u);
  for (std::size_t k = 1; k < set.spline_parameter.size(); ++k) {
    EXPECT_GT(set.spline_parameter[k], set.spline_parameter[k - 1]);
  }
  for (std::size_t k = 0; k < set.poses.size(); ++k) {
    EXPECT_TRUE(set.poses[k].rotation_is_valid());
    EXPECT_EQ(set.source_view[k], nearest_view(scene.gt.views, set.poses[k].center()));
  }
  EXPECT_THROW(sample_novel_poses({Pose()}, 3), ValidationError);
  EXPECT_THROW(sample_novel_poses(scene.gt.views, 0), ValidationError);
}

TEST(SampleNovelPoses, CollinearCentersStayOnTheLine) {
  std::vector<Pose> poses;
  for (int k = 0; k < 4; ++k) poses.push_back(Pose::from_camera_center(Mat3::Identity(), Vec3(k, 0.0, 0.0)));
  const auto set = sample_novel_poses(poses, 5);
  for (const auto& p : set.poses) {
    EXPECT_NEAR(p.center().y(), 0.0, 1e-12);
    EXPECT_NEAR(p.center().z(), 0.0, 1e-12);
    EXPECT_GE(p.center().x(), 0.0);
    EXPECT_LE(p.center().x(), 3.0);
    EXPECT_NEAR((p.rotation - Mat3::Identity()).norm(), 0.0, 1e-12);
  }
}

TEST(BSpline, EndpointsInterpolateAndLinearControlGivesLine) {
  const std::vector<Vec3> c{Vec3(0, 0, 0), Vec3(1, 2, 0), Vec3(3, 1, 1), Vec3(4, 0, 2)};
  EXPECT_NEAR((bspline_point(c, 3, 0.0) - c.front()).norm(), 0.0, 1e-12);
  EXPECT_NEAR((bspline_point(c, 3, 1.0) - c.back()).norm(), 0.0, 1e-12);
  const std::vector<Vec3> line{Vec3(0, 0, 0), Vec3(1, 1, 1), Vec3(2, 2, 2), Vec3(3, 3, 3), Vec3(4, 4, 4)};
  for (double t = 0.0; t <= 1.0; t += 0.1) {
    const Vec3 p = bspline_point(line, 3, t);
    EXPECT_NEAR(p.x(), p.y(), 1e-12);
    EXPECT_NEAR(p.y(), p.z(), 1e-12);
  }
}

TEST(Warp, IdentityPoseReproducesSourceBitExactly) {
  const auto scene = make_box_room(SyntheticSpec{});
  const CameraIntrinsics intr(60.0, 64, 48);
  const auto r = warp(scene.images[0], scene.depths[0], scene.gt.views[0], scene.gt.views[0], intr);
  EXPECT_EQ(r.warped, scene.images[0]);
  EXPECT_EQ(count_true(r.raw_mask), r.raw_mask.size());
}

TEST(Warp, ZBufferKeepsNearestPoint) {
  // Two source pixels land on one destination pixel; the nearer one wins.
  const CameraIntrinsics intr(10.0, 4, 1);
  ColorImage src(4, 1);
  src.set(0, 0, Vec3(1, 0, 0));
  src.set(1, 0, Vec3(0, 1, 0));
  src.set(2, 0, Vec3(0, 0, 1));
  src.set(3, 0, Vec3(1, 1, 1));
  ScalarMap depth(4, 1, 5.0);
  depth(2, 0) = 2.0;
  // Shift chosen so that pixel 2 at depth 2 and pixel 1 at depth 5 collide.
  // x_dst = x + f * t / z: pixel 1 -> 1 + 10 t / 5, pixel 2 -> 2 + 10 t / 2.
  const double t = -1.0 / (10.0 / 2.0 - 10.0 / 5.0);
  const Pose dst(Mat3::Identity(), Vec3(t, 0.0, 0.0));
  const auto r = warp(src, depth, Pose(), dst, intr);
  const int px = static_cast<int>(std::floor(1.0 + 10.0 * t / 5.0 + 0.5));
  ASSERT_GE(px, 0);
  EXPECT_EQ(r.warped(px, 0), Vec3(0, 0, 1));
  EXPECT_DOUBLE_EQ(r.zbuffer(px, 0), 2.0);
}

TEST(Warp, ZBufferIsMinimumOverContributors) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(1.0, 4.0);
  const CameraIntrinsics intr(20.0, 24, 20);
  ColorImage src(24, 20);
  ScalarMap depth(24, 20);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    depth[i] = u(rng);
    src[i] = Vec3(u(rng) / 4, u(rng) / 4, u(rng) / 4);
  }
  const Pose dst(so3_exp(Vec3(0.02, -0.05, 0.01)), Vec3(0.3, -0.1, 0.05));
  const auto r = warp(src, depth, Pose(), dst, intr);
  ScalarMap zmin(24, 20, std::numeric_limits<double>::infinity());
  for (int y = 0; y < 20; ++y) {
    for (int x = 0; x < 24; ++x) {
      const Vec3 p = dst.apply(unproject(Vec2(x, y), depth(x, y), intr));
      const auto q = project(p, intr);
      if (!q) continue;
      const int dx = static_cast<int>(std::floor(q->pixel.x() + 0.5)), dy = static_cast<int>(std::floor(q->pixel.y() + 0.5));
      if (dx < 0 || dy < 0 || dx >= 24 || dy >= 20) continue;
      zmin(dx, dy) = std::min(zmin(dx, dy), q->depth);
    }
  }
  for (std::size_t i = 0; i < zmin.size(); ++i) {
    EXPECT_EQ(r.zbuffer[i], zmin[i]);
    EXPECT_EQ(r.raw_mask[i] != 0, std::isfinite(zmin[i]));
  }
}

TEST(Warp, LateralShiftMatchesAnalyticPlane) {
  const oracle::TexturedPlane plane;
  const CameraIntrinsics intr(96.0, 128, 96);
  const Pose src;
  const Pose dst = Pose::from_camera_center(Mat3::Identity(), Vec3(0.1 * plane.depth, 0.0, 0.0));
  const auto [src_img, src_depth] = plane.render(src, intr);
  const auto [dst_img, dst_depth] = plane.render(dst, intr);
  const auto r = warp(src_img, src_depth, src, dst, intr);
  EXPECT_GT(count_true(r.raw_mask), r.raw_mask.size() / 2);
  EXPECT_GT(masked_psnr(r.warped, dst_img, r.raw_mask), 35.0);
}

TEST(Warp, RotationOnlyCoverageIgnoresDepth) {
  const CameraIntrinsics intr(40.0, 32, 24);
  ColorImage src(32, 24, Vec3(0.5, 0.5, 0.5));
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(1.0, 9.0);
  ScalarMap d1(32, 24), d2(32, 24);
  for (std::size_t i = 0; i < d1.size(); ++i) d1[i] = u(rng);
  d2 = d1;
  std::shuffle(d2.data().begin(), d2.data().end(), rng);
  const Pose dst(so3_exp(Vec3(0.03, 0.08, -0.02)), Vec3::Zero());
  EXPECT_EQ(warp(src, d1, Pose(), dst, intr).raw_mask, warp(src, d2, Pose(), dst, intr).raw_mask);
}

TEST(Warp, SkipsInvalidDepthAndRejectsMostlyInvalid) {
  const CameraIntrinsics intr(10.0, 4, 4);
  ColorImage src(4, 4, Vec3(1, 1, 1));
  ScalarMap d(4, 4, 1.0);
  d[0] = -1.0;
  d[1] = std::nan("");
  const auto r = warp(src, d, Pose(), Pose(), intr);
  EXPECT_EQ(r.skipped_pixels, 2u);
  EXPECT_EQ(count_true(r.raw_mask), 14u);
  for (int i = 0; i < 9; ++i) d[static_cast<std::size_t>(i)] = 0.0;
  try {
    warp(src, d, Pose(), Pose(), intr);
    FAIL() << "expected WarpDegenerateError";
  } catch (const WarpDegenerateError& e) {
    EXPECT_EQ(e.skipped(), 9u);
    EXPECT_EQ(e.total(), 16u);
  }
}

TEST(CleanMask, MatchesBruteForceOnRandomMasks) {
  std::mt19937_64 rng(21);
  for (int w : {3, 5}) {
    for (int k = 0; k < 2000; ++k) {
      const BinaryMask m = random_mask(5, 5, rng, 0.1 + 0.8 * (k % 9) / 8.0);
      ASSERT_EQ(clean_mask(m, w), oracle::clean_mask_bruteforce(m, w));
    }
    for (int k = 0; k < 50; ++k) {
      const BinaryMask m = random_mask(23, 17, rng, 0.6);
      ASSERT_EQ(clean_mask(m, w), oracle::clean_mask_bruteforce(m, w));
    }
  }
}

TEST(CleanMask, HandcraftedCases) {
  BinaryMask all(6, 5, 1);
  EXPECT_EQ(clean_mask(all, 3), all);
  EXPECT_EQ(clean_mask(all, 5), all);
  BinaryMask none(6, 5, 0);
  EXPECT_EQ(clean_mask(none, 3), none);
  BinaryMask single(7, 7, 0);
  single(3, 3) = 1;
  EXPECT_EQ(count_true(clean_mask(single, 3)), 0u);

  // Solid 4x7 block with a one-pixel-wide spur of length 3 sticking out.
  BinaryMask spur(7, 7, 0);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 4; ++x) spur(x, y) = 1;
  for (int x = 4; x < 7; ++x) spur(x, 3) = 1;
  const BinaryMask out = clean_mask(spur, 3);
  EXPECT_EQ(out, oracle::clean_mask_bruteforce(spur, 3));
  EXPECT_EQ(out(5, 3), 0);
  EXPECT_EQ(out(6, 3), 0);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 3; ++x) EXPECT_EQ(out(x, y), 1);

  EXPECT_THROW(clean_mask(all, 4), std::domain_error);
  EXPECT_THROW(clean_mask(all, 1), std::domain_error);
}

TEST(CleanMask, NeverAddsPixels) {
  std::mt19937_64 rng(22);
  for (int k = 0; k < 200; ++k) {
    const BinaryMask m = random_mask(9, 9, rng, 0.5);
    const BinaryMask c = clean_mask(m, 5);
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_LE(c[i], m[i]);
  }
}

TEST(Inpaint, FullMaskIsIdentityAndConstantStaysConstant) {
  ColorImage img(8, 8);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = Vec3(i / 64.0, 0.3, 0.9);
  EXPECT_EQ(inpaint_diffusion(img, BinaryMask(8, 8, 1)), img);

  const ColorImage flat(10, 10, Vec3(0.2, 0.4, 0.6));
  std::mt19937_64 rng(3);
  const BinaryMask m = random_mask(10, 10, rng, 0.4);
  const ColorImage out = inpaint_diffusion(flat, m);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR((out[i] - flat[i]).norm(), 0.0, 1e-12);
  EXPECT_THROW(inpaint_diffusion(flat, BinaryMask(10, 10, 0)), InpaintError);
}

TEST(Inpaint, LinearGradientHoleIsFilledHarmonically) {
  ColorImage img(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) img(x, y) = Vec3(x / 31.0, y / 31.0, 0.5);
  BinaryMask known(32, 32, 1);
  ColorImage holed = img;
  for (int y = 12; y < 20; ++y) {
    for (int x = 12; x < 20; ++x) {
      known(x, y) = 0;
      holed(x, y) = Vec3::Zero();
    }
  }
  const ColorImage out = inpaint_diffusion(holed, known);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (known[i]) {
      EXPECT_EQ(out[i], holed[i]);
    } else {
      EXPECT_LT((out[i] - img[i]).cwiseAbs().maxCoeff(), 0.02);
    }
  }
}

TEST(Inpaint, ExternalProcessAdapter) {
  const fs::path dir = fs::temp_directory_path() / "d2t_ext_inpaint_test";
  fs::create_directories(dir);
  const fs::path script = dir / "fill.sh";
  {
    std::ofstream f(script);
    f << "#!/bin/sh\ncp \"$1\" \"$3\"\n";
  }
  fs::permissions(script, fs::perms::owner_all);
  ColorImage img(6, 4, Vec3(0.2, 0.4, 0.6));
  img.set(1, 1, Vec3(0.123, 0.456, 0.789));
  BinaryMask known(6, 4, 1);
  known(0, 0) = 0;
  const ExternalProcessInpainter ext(script.string());
  const ColorImage out = ext.fill(img, known);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (known[i]) EXPECT_EQ(out[i], img[i]);

  const ExternalProcessInpainter failing("false");
  EXPECT_THROW(failing.fill(img, known), InpaintError);
  fs::remove_all(dir);
}

TEST(Synthesize, TrainingPoseReproducesTheTrainingImage) {
  const auto scene = make_box_room(SyntheticSpec{});
  const CameraIntrinsics intr(60.0, 64, 48);
  NovelPoseSet set;
  set.poses = {scene.gt.views[1]};
  set.source_view = {1};
  set.spline_parameter = {0.5};
  const auto out = synthesize(scene.images, scene.depths, scene.gt.views, set, intr, DiffusionInpainter());
  ASSERT_EQ(out.results.size(), 1u);
  EXPECT_EQ(*out.results[0].inpainted, scene.images[1]);
}

TEST(Synthesize, EveryResultIsDefinedEverywhereAndKeepsCleanedPixels) {
  const auto scene = make_box_room(SyntheticSpec{});
  const CameraIntrinsics intr(60.0, 64, 48);
  const auto set = sample_novel_poses(scene.gt.views, 2);
  const auto out = synthesize(scene.images, scene.depths, scene.gt.views, set, intr, DiffusionInpainter());
  ASSERT_EQ(out.results.size(), 4u);
  EXPECT_TRUE(out.warnings.empty());
  for (const auto& r : out.results) {
    ASSERT_TRUE(r.inpainted.has_value());
    for (std::size_t i = 0; i < r.cleaned_mask.size(); ++i) {
      EXPECT_TRUE((*r.inpainted)[i].allFinite());
      if (r.cleaned_mask[i]) EXPECT_EQ((*r.inpainted)[i], r.warped[i]);
    }
  }
}

TEST(Synthesize, FailedPoseBecomesAWarning) {
  const auto scene = make_box_room(SyntheticSpec{});
  const CameraIntrinsics intr(60.0, 64, 48);
  auto depths = scene.depths;
  for (double& v : depths[0].data()) v = -1.0;
  NovelPoseSet set;
  set.poses = {scene.gt.views[0], scene.gt.views[1]};
  set.source_view = {0, 1};
  set.spline_parameter = {0.0, 0.5};
  const auto out = synthesize(scene.images, depths, scene.gt.views, set, intr, DiffusionInpainter());
  EXPECT_EQ(out.results.size(), 1u);
  ASSERT_EQ(out.warnings.size(), 1u);
  EXPECT_EQ(out.warnings[0].pose_index, 0u);
}

TEST(Synthesize, HoleFractionShrinksTowardsTheSource) {
  const auto scene = make_box_room(SyntheticSpec{});
  const CameraIntrinsics intr(60.0, 64, 48);
  const Pose a = scene.gt.views[0], b = scene.gt.views[2];
  double prev = 2.0;
  for (int k = 4; k >= 0; --k) {
    const double t = k / 4.0;
    const Eigen::Quaterniond qa(a.rotation), qb(b.rotation);
    const Mat3 r = qa.slerp(t, qb).toRotationMatrix();
    const Vec3 c = (1.0 - t) * a.center() + t * b.center();
    const Pose p = Pose::from_camera_center(r.transpose(), c);
    const auto w = warp(scene.images[0], scene.depths[0], a, p, intr);
    const double holes = 1.0 - static_cast<double>(count_true(clean_mask(w.raw_mask, 5))) / w.raw_mask.size();
    EXPECT_LE(holes, prev);
    prev = holes;
  }
  EXPECT_EQ(prev, 0.0);
}
