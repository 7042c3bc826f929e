#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"

using namespace d2t;
namespace fs = std::filesystem;

TEST(Projection, RoundTripRandomPoints) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const CameraIntrinsics intr(250.0, 128, 96);
  for (int i = 0; i < 1000; ++i) {
    const Vec2 px(u(rng) * 128.0, u(rng) * 96.0);
    const double d = 0.1 + 20.0 * u(rng);
    const auto p = project(unproject(px, d, intr), intr);
    ASSERT_TRUE(p.has_value());
    EXPECT_NEAR((p->pixel - px).norm(), 0.0, 1e-9);
    EXPECT_NEAR(p->depth, d, 1e-12);
  }
}

TEST(Projection, PrincipalPointIsImageCenter) {
  const CameraIntrinsics intr(100.0, 64, 48);
  const Vec3 p = unproject(Vec2(32.0, 24.0), 5.0, intr);
  EXPECT_EQ(p, Vec3(0.0, 0.0, 5.0));
  EXPECT_EQ(intr.K()(0, 2), 32.0);
  EXPECT_EQ(intr.K()(1, 2), 24.0);
}

TEST(Projection, RejectsInvalidDepthAndPointsBehind) {
  const CameraIntrinsics intr(100.0, 64, 48);
  EXPECT_THROW(unproject(Vec2(1, 1), 0.0, intr), std::domain_error);
  EXPECT_THROW(unproject(Vec2(1, 1), -2.0, intr), std::domain_error);
  EXPECT_THROW(unproject(Vec2(1, 1), std::nan(""), intr), std::domain_error);
  EXPECT_FALSE(project(Vec3(0.1, 0.2, 0.0), intr).has_value());
  EXPECT_FALSE(project(Vec3(0.1, 0.2, -1.0), intr).has_value());
}

TEST(Intrinsics, RejectsBadValuesAndResizesKeepingFieldOfView) {
  EXPECT_THROW(CameraIntrinsics(0.0, 10, 10), std::domain_error);
  EXPECT_THROW(CameraIntrinsics(10.0, 0, 10), std::domain_error);
  const CameraIntrinsics a(60.0, 64, 48);
  const CameraIntrinsics b = a.resized(32, 24);
  EXPECT_DOUBLE_EQ(b.focal, 30.0);
  // A corner ray keeps its direction.
  const Vec3 ra = unproject(Vec2(0, 0), 1.0, a), rb = unproject(Vec2(0, 0), 1.0, b);
  EXPECT_NEAR((ra - rb).norm(), 0.0, 1e-12);
}

TEST(Pose, ComposeWithInverseIsIdentity) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    const Pose p = oracle::random_pose(rng);
    const Pose e = p * p.inverse();
    EXPECT_NEAR((e.matrix() - Mat4::Identity()).norm(), 0.0, 1e-12);
    EXPECT_NEAR(((p.inverse() * p).matrix() - Mat4::Identity()).norm(), 0.0, 1e-12);
  }
}

TEST(Pose, ComposeMatchesMatrixProduct) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const Pose a = oracle::random_pose(rng), b = oracle::random_pose(rng);
    EXPECT_NEAR(((a * b).matrix() - a.matrix() * b.matrix()).norm(), 0.0, 1e-12);
    EXPECT_NEAR((compose(a, b).apply(Vec3(1, 2, 3)) - a.apply(b.apply(Vec3(1, 2, 3)))).norm(), 0.0, 1e-12);
    EXPECT_NEAR((invert(a).matrix() - a.matrix().inverse()).norm(), 0.0, 1e-12);
  }
}

TEST(Pose, CameraCenterMapsToOrigin) {
  std::mt19937_64 rng(4);
  const Pose p = oracle::random_pose(rng);
  EXPECT_NEAR(p.apply(p.center()).norm(), 0.0, 1e-12);
}

TEST(Lie, ZeroTwistIsIdentityAndLeavesPoseBitIdentical) {
  const Pose e = se3_exp(Vec6::Zero());
  EXPECT_EQ(e.matrix(), Mat4::Identity());
  std::mt19937_64 rng(5);
  const Pose p = oracle::random_pose(rng);
  const Pose q = perturb_left(p, Vec6::Zero());
  EXPECT_EQ(q.rotation, p.rotation);
  EXPECT_EQ(q.translation, p.translation);
}

TEST(Lie, ExpMatchesMatrixSeries) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    Vec6 xi;
    for (int k = 0; k < 6; ++k) xi[k] = n(rng) * (i < 20 ? 1e-5 : 0.8);
    EXPECT_NEAR((se3_exp(xi).matrix() - oracle::se3_exp_series(xi)).norm(), 0.0, 1e-10) << xi.transpose();
  }
}

TEST(Lie, So3LogInvertsExp) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 200; ++i) {
    Vec3 w(n(rng), n(rng), n(rng));
    w = w.normalized() * std::fmod(std::abs(n(rng)), 3.0);
    EXPECT_NEAR((so3_log(so3_exp(w)) - w).norm(), 0.0, 1e-9);
  }
}

TEST(Lie, PerturbLeftMultipliesOnTheLeft) {
  std::mt19937_64 rng(8);
  const Pose p = oracle::random_pose(rng);
  Vec6 d;
  d << 0.1, -0.2, 0.05, 0.3, 0.1, -0.4;
  EXPECT_NEAR((perturb_left(p, d).matrix() - oracle::se3_exp_series(d) * p.matrix()).norm(), 0.0, 1e-10);
  EXPECT_TRUE(perturb_left(p, d).rotation_is_valid());
}

TEST(Lie, EnforceRotationRestoresOrthonormality) {
  Pose p(so3_exp(Vec3(0.3, 0.1, -0.2)), Vec3::Zero());
  p.rotation(0, 1) += 1e-6;
  EXPECT_FALSE(p.rotation_is_valid());
  p.enforce_rotation();
  EXPECT_TRUE(p.rotation_is_valid());
}

TEST(Grid, RejectsNonPositiveDimensions) {
  EXPECT_THROW(ScalarMap(0, 4), std::invalid_argument);
  EXPECT_THROW(ScalarMap(3, 2, std::vector<double>(5)), std::invalid_argument);
  const PointMap p(3, 2);
  for (const auto& v : p.data()) EXPECT_EQ(v, Vec3::Zero());
}

TEST(ColorImage, ClampsAndZeroesNonFinite) {
  ColorImage img(2, 1);
  img.set(0, 0, Vec3(1.5, -0.2, std::nan("")));
  EXPECT_EQ(img(0, 0), Vec3(1.0, 0.0, 0.0));
}

TEST(Upsample, ConstantMapStaysConstant) {
  const ScalarMap c(8, 6, 2.5);
  const ScalarMap up = upsample_bilinear(c, 32, 24);
  for (double v : up.data()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(Upsample, ReproducesLinearFieldAwayFromTheClampedEdge) {
  ScalarMap src(8, 6);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x) src(x, y) = 0.5 * x - 0.25 * y + 1.0;
  const ScalarMap up = upsample_bilinear(src, 32, 24);
  for (int y = 0; y < 24; ++y) {
    for (int x = 0; x < 32; ++x) {
      const double sx = x * 8.0 / 32.0, sy = y * 6.0 / 24.0;
      if (sx > 7.0 || sy > 5.0) continue;
      EXPECT_NEAR(up(x, y), 0.5 * sx - 0.25 * sy + 1.0, 1e-12);
    }
  }
}

class IoTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("d2t_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                       "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  fs::path dir;
};

TEST_F(IoTest, PfmScalarRoundTripIsExactInFloat) {
  ScalarMap m(7, 5);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(0.1 * i - 1.3);
  io::write_pfm(dir / "a.pfm", m);
  EXPECT_EQ(io::read_pfm_scalar(dir / "a.pfm"), m);
}

TEST_F(IoTest, PfmColorRoundTripKeepsRowOrder) {
  ColorImage img(4, 3);
  img.set(0, 0, Vec3(1, 0, 0));
  img.set(3, 2, Vec3(0, 0.5, 1));
  io::write_pfm(dir / "c.pfm", img);
  const ColorImage back = io::read_pfm_color(dir / "c.pfm");
  EXPECT_EQ(back(0, 0), Vec3(1, 0, 0));
  EXPECT_EQ(back(3, 2), Vec3(0, 0.5, 1));
}

TEST_F(IoTest, TruncatedPfmReportsByteOffset) {
  ScalarMap m(4, 4, 1.0);
  io::write_pfm(dir / "t.pfm", m);
  std::string bytes = io::read_file(dir / "t.pfm");
  bytes.resize(bytes.size() - 6);
  try {
    io::decode_pfm(bytes, "t.pfm");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.byte_offset(), bytes.size());
    EXPECT_EQ(e.file(), "t.pfm");
  }
  EXPECT_THROW(io::decode_pfm("P6\n1 1\n", "x"), ParseError);
}

TEST_F(IoTest, PngAndPpmRoundTripWithinQuantization) {
  ColorImage img(9, 4);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = Vec3(i / 36.0, 1.0 - i / 36.0, 0.5);
  for (const char* name : {"a.png", "a.ppm"}) {
    io::write_image(dir / name, img);
    const ColorImage back = io::read_image(dir / name);
    ASSERT_TRUE(back.same_shape(img));
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE((back[i] - img[i]).cwiseAbs().maxCoeff(), 0.5 / 255.0 + 1e-12);
  }
  EXPECT_THROW(io::read_image(dir / "missing.png"), Error);
}
