#pragma once

// Gaussian-window SSIM on [0, 1] images with its gradient. Filtering is
// separable with zero padding and "same" output size; the score is the mean
// of the per-pixel SSIM map over pixels and channels.

#include <cmath>
#include <vector>

#include "d2t/core_geometry.hpp"
#include "d2t/errors.hpp"

namespace d2t {

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const int half = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - half;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (double& v : g) v /= sum;
  return g;
}

// Symmetric kernel, so this filter is its own adjoint.
inline std::vector<double> filter2d(const std::vector<double>& img, int w, int h, const std::vector<double>& g) {
  const int half = static_cast<int>(g.size()) / 2;
  std::vector<double> tmp(img.size(), 0.0), out(img.size(), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -half; k <= half; ++k) {
        const int xx = x + k;
        if (xx < 0 || xx >= w) continue;
        s += g[static_cast<std::size_t>(k + half)] * img[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int k = -half; k <= half; ++k) {
        const int yy = y + k;
        if (yy < 0 || yy >= h) continue;
        s += g[static_cast<std::size_t>(k + half)] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  return out;
}

}  // namespace detail

// Mean SSIM of a against b. When grad_a is given it receives d(score)/d(a).
inline double ssim(const ColorImage& a, const ColorImage& b, Grid<Vec3>* grad_a = nullptr,
                   const SsimConfig& cfg = {}) {
  if (!a.same_shape(b)) throw ValidationError("ssim: image sizes differ");
  const int w = a.width(), h = a.height();
  const std::size_t n = a.size();
  const auto g = detail::gaussian_window(cfg.window, cfg.sigma);
  if (grad_a) *grad_a = Grid<Vec3>(w, h, Vec3::Zero());
  const double norm = 1.0 / (3.0 * static_cast<double>(n));
  double total = 0.0;
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a[i][c];
      y[i] = b[i][c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter2d(x, w, h, g);
    const auto my = detail::filter2d(y, w, h, g);
    const auto exx = detail::filter2d(xx, w, h, g);
    const auto eyy = detail::filter2d(yy, w, h, g);
    const auto exy = detail::filter2d(xy, w, h, g);
    std::vector<double> d_mu(n), d_exy(n), d_exx(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double a1 = 2.0 * mx[i] * my[i] + cfg.c1;
      const double a2 = 2.0 * (exy[i] - mx[i] * my[i]) + cfg.c2;
      const double b1 = mx[i] * mx[i] + my[i] * my[i] + cfg.c1;
      const double b2 = exx[i] - mx[i] * mx[i] + eyy[i] - my[i] * my[i] + cfg.c2;
      const double s = a1 * a2 / (b1 * b2);
      total += s;
      if (!grad_a) continue;
      d_mu[i] = norm * ((2.0 * my[i] * a2 - 2.0 * my[i] * a1) / (b1 * b2) -
                        s * (2.0 * mx[i] / b1 - 2.0 * mx[i] / b2));
      d_exy[i] = norm * 2.0 * a1 / (b1 * b2);
      d_exx[i] = -norm * s / b2;
    }
    if (!grad_a) continue;
    const auto f_mu = detail::filter2d(d_mu, w, h, g);
    const auto f_xy = detail::filter2d(d_exy, w, h, g);
    const auto f_xx = detail::filter2d(d_exx, w, h, g);
    for (std::size_t i = 0; i < n; ++i) {
      (*grad_a)[i][c] = f_mu[i] + y[i] * f_xy[i] + 2.0 * x[i] * f_xx[i];
    }
  }
  return total * norm;
}

}  // namespace d2t
