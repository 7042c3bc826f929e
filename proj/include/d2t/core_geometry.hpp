#pragma once

// Camera, pose and image-grid primitives shared by every stage of the
// pipeline.
//
// Conventions used throughout the library:
//   * Pose maps WORLD coordinates to CAMERA coordinates: x_cam = R * x_world + t.
//   * Pixel (i, j) samples the continuous image location (i, j); the principal
//     point sits at (width / 2, height / 2).
//   * Images and maps are stored row-major, index = y * width + x.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace d2t {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct CameraIntrinsics {
  double focal = 1.0;
  int width = 1;
  int height = 1;

  CameraIntrinsics() = default;
  CameraIntrinsics(double f, int w, int h) : focal(f), width(w), height(h) {
    if (!(f > 0.0) || !std::isfinite(f)) {
      throw std::domain_error("CameraIntrinsics: focal must be positive and finite");
    }
    if (w <= 0 || h <= 0) {
      throw std::domain_error("CameraIntrinsics: width and height must be positive");
    }
  }

  double cx() const { return 0.5 * width; }
  double cy() const { return 0.5 * height; }

  Mat3 K() const {
    Mat3 k = Mat3::Identity();
    k(0, 0) = focal;
    k(1, 1) = focal;
    k(0, 2) = cx();
    k(1, 2) = cy();
    return k;
  }

  // Same camera sampled on a different pixel grid. The field of view is kept,
  // so focal scales with the width ratio.
  CameraIntrinsics resized(int w, int h) const {
    return CameraIntrinsics(focal * static_cast<double>(w) / width, w, h);
  }

  bool contains(double x, double y) const {
    return x >= 0.0 && y >= 0.0 && x <= width - 1 && y <= height - 1;
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

// Rodrigues formula with a series expansion near zero.
inline Mat3 so3_exp(const Vec3& omega) {
  const double theta2 = omega.squaredNorm();
  const Mat3 w = skew(omega);
  double a, b;
  if (theta2 < 1e-16) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    const double theta = std::sqrt(theta2);
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  return Mat3::Identity() + a * w + b * w * w;
}

inline Vec3 so3_log(const Mat3& r) {
  const Eigen::AngleAxisd aa(r);
  return aa.angle() * aa.axis();
}

// Geodesic angle between two rotations, radians.
inline double rotation_angle(const Mat3& a, const Mat3& b) {
  // atan2 keeps full precision near 0 and pi, where acos of the trace does not.
  const Mat3 r = a.transpose() * b;
  const Vec3 v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return std::atan2(0.5 * v.norm(), 0.5 * (r.trace() - 1.0));
}

// Projects an almost-rotation back onto SO(3).
inline Mat3 orthonormalize(const Mat3& r) {
  Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 out = svd.matrixU() * svd.matrixV().transpose();
  if (out.determinant() < 0.0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1.0;
    out = u * svd.matrixV().transpose();
  }
  return out;
}

// Rigid transform, world-to-camera.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Pose() = default;
  Pose(const Mat3& r, const Vec3& t) : rotation(r), translation(t) {}

  static Pose identity() { return Pose(); }

  // Build from a camera-to-world rotation and camera center.
  static Pose from_camera_center(const Mat3& cam_to_world_rotation, const Vec3& center) {
    const Mat3 r = cam_to_world_rotation.transpose();
    return Pose(r, -r * center);
  }

  static Pose from_matrix(const Mat4& m) {
    return Pose(m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>());
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation;
    m.topRightCorner<3, 1>() = translation;
    return m;
  }

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
  Vec3 center() const { return -rotation.transpose() * translation; }

  Pose inverse() const {
    const Mat3 rt = rotation.transpose();
    return Pose(rt, -rt * translation);
  }

  // (a * b)(x) = a(b(x))
  Pose operator*(const Pose& b) const {
    return Pose(rotation * b.rotation, rotation * b.translation + translation);
  }

  bool rotation_is_valid(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
           std::abs(rotation.determinant() - 1.0) < tol;
  }

  // Re-projects the rotation onto SO(3) when drift exceeds tol.
  void enforce_rotation(double tol = 1e-9) {
    if (!rotation_is_valid(tol)) rotation = orthonormalize(rotation);
  }
};

inline Pose compose(const Pose& a, const Pose& b) { return a * b; }
inline Pose invert(const Pose& a) { return a.inverse(); }

// Exponential of an se(3) twist ordered (rotation 3-vector, translation 3-vector).
inline Pose se3_exp(const Vec6& xi) {
  const Vec3 omega = xi.head<3>();
  const Vec3 v = xi.tail<3>();
  const double theta2 = omega.squaredNorm();
  const Mat3 w = skew(omega);
  double b, c;
  if (theta2 < 1e-16) {
    b = 0.5 - theta2 / 24.0;
    c = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    const double theta = std::sqrt(theta2);
    b = (1.0 - std::cos(theta)) / theta2;
    c = (theta - std::sin(theta)) / (theta2 * theta);
  }
  const Mat3 vmat = Mat3::Identity() + b * w + c * w * w;
  return Pose(so3_exp(omega), vmat * v);
}

// Left-multiplied perturbation exp(delta) * pose. A zero twist returns the pose
// untouched, bit for bit.
inline Pose perturb_left(const Pose& pose, const Vec6& delta) {
  if ((delta.array() == 0.0).all()) return pose;
  Pose out = se3_exp(delta) * pose;
  out.enforce_rotation();
  return out;
}

struct Projection {
  Vec2 pixel;
  double depth;
};

// Inverse of project(): pixel (i, j) at depth d -> camera-frame point.
inline Vec3 unproject(const Vec2& pixel, double depth, const CameraIntrinsics& intr) {
  if (!(depth > 0.0) || !std::isfinite(depth)) {
    throw std::domain_error("unproject: depth must be positive and finite");
  }
  return Vec3((pixel.x() - intr.cx()) * depth / intr.focal,
              (pixel.y() - intr.cy()) * depth / intr.focal, depth);
}

// Returns nullopt for points on or behind the camera plane. In-bounds
// filtering is left to the caller.
inline std::optional<Projection> project(const Vec3& point, const CameraIntrinsics& intr) {
  if (!(point.z() > 0.0)) return std::nullopt;
  return Projection{Vec2(intr.focal * point.x() / point.z() + intr.cx(),
                         intr.focal * point.y() / point.z() + intr.cy()),
                    point.z()};
}

template <typename T>
T zero_value() {
  if constexpr (requires { T::Zero(); }) {
    return T::Zero();
  } else {
    return T{};
  }
}

// Row-major 2-D grid.
template <typename T>
class Grid {
 public:
  using value_type = T;

  Grid() = default;
  Grid(int width, int height, const T& fill = zero_value<T>())
      : width_(width), height_(height), data_(checked_size(width, height), fill) {}
  Grid(int width, int height, std::vector<T> data)
      : width_(width), height_(height), data_(std::move(data)) {
    if (data_.size() != checked_size(width, height)) {
      throw std::invalid_argument("Grid: data size does not match dimensions");
    }
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool same_shape(int w, int h) const { return w == width_ && h == height_; }
  template <typename U>
  bool same_shape(const Grid<U>& o) const {
    return o.width() == width_ && o.height() == height_;
  }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool operator==(const Grid& o) const {
    return width_ == o.width_ && height_ == o.height_ && data_ == o.data_;
  }

 private:
  static std::size_t checked_size(int w, int h) {
    if (w <= 0 || h <= 0) throw std::invalid_argument("Grid: dimensions must be positive");
    return static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

// Depth maps use a non-finite sentinel at invalid pixels; confidence maps are
// non-negative everywhere.
using ScalarMap = Grid<double>;
using BinaryMask = Grid<std::uint8_t>;
using PointMap = Grid<Vec3>;

inline double invalid_depth() { return std::numeric_limits<double>::quiet_NaN(); }

inline std::size_t count_true(const BinaryMask& m) {
  return static_cast<std::size_t>(std::count_if(m.data().begin(), m.data().end(),
                                                [](std::uint8_t v) { return v != 0; }));
}

// RGB image with samples clamped to [0, 1]; non-finite samples become 0.
class ColorImage : public Grid<Vec3> {
 public:
  ColorImage() = default;
  ColorImage(int width, int height, const Vec3& fill = Vec3::Zero())
      : Grid<Vec3>(width, height, clamp(fill)) {}
  ColorImage(int width, int height, std::vector<Vec3> data)
      : Grid<Vec3>(width, height, std::move(data)) {
    for (auto& v : this->data()) v = clamp(v);
  }

  void set(int x, int y, const Vec3& v) { (*this)(x, y) = clamp(v); }

  static Vec3 clamp(const Vec3& v) {
    Vec3 out;
    for (int c = 0; c < 3; ++c) {
      out[c] = std::isfinite(v[c]) ? std::clamp(v[c], 0.0, 1.0) : 0.0;
    }
    return out;
  }
};

// Bilinear sample with coordinates clamped to the grid.
inline double sample_bilinear(const ScalarMap& map, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(map.width() - 1));
  y = std::clamp(y, 0.0, static_cast<double>(map.height() - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, map.width() - 1);
  const int y1 = std::min(y0 + 1, map.height() - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = (1.0 - fx) * map(x0, y0) + fx * map(x1, y0);
  const double bottom = (1.0 - fx) * map(x0, y1) + fx * map(x1, y1);
  return (1.0 - fy) * top + fy * bottom;
}

// Resamples onto a width x height grid. Destination pixel (x, y) reads source
// location (x * W_src / W_dst, y * H_src / H_dst), which keeps the centered
// principal point of both grids aligned.
inline ScalarMap upsample_bilinear(const ScalarMap& src, int width, int height) {
  ScalarMap out(width, height);
  const double sx = static_cast<double>(src.width()) / width;
  const double sy = static_cast<double>(src.height()) / height;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      out(x, y) = sample_bilinear(src, x * sx, y * sy);
    }
  }
  return out;
}

}  // namespace d2t
