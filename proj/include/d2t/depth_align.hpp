#pragma once

// Confidence-aware alignment of a monocular inverse-depth map to the
// upsampled coarse depth.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "d2t/core_geometry.hpp"
#include "d2t/errors.hpp"

namespace d2t {

struct AffineDepthFit {
  double scale = 1.0;  // a
  double shift = 0.0;  // b
  BinaryMask mask;
  double retained_fraction = 1.0;
};

// Pointwise maximum over every confidence map of one view.
inline ScalarMap build_confidence(const std::vector<ScalarMap>& maps) {
  if (maps.empty()) throw ValidationError("build_confidence: no confidence maps");
  ScalarMap out = maps.front();
  for (std::size_t k = 1; k < maps.size(); ++k) {
    if (!maps[k].same_shape(out)) {
      throw ValidationError("build_confidence: map " + std::to_string(k) + " has mismatched size");
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], maps[k][i]);
  }
  return out;
}

inline std::size_t top_p_count(std::size_t n, double p) {
  // The epsilon absorbs representation error in p * n (0.3 * 10 = 3.0000000000000004).
  const double raw = p * static_cast<double>(n);
  return std::min(n, static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw))));
}

// Sets exactly ceil(P * W * H) pixels holding the largest confidences; ties go
// to the earlier pixel in raster order.
inline BinaryMask top_p_mask(const ScalarMap& confidence, double p) {
  if (!(p > 0.0) || p > 1.0) throw std::domain_error("top_p_mask: P must lie in (0, 1]");
  const std::size_t n = confidence.size();
  const std::size_t keep = top_p_count(n, p);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return confidence[a] > confidence[b];
  });
  BinaryMask mask(confidence.width(), confidence.height(), 0);
  for (std::size_t k = 0; k < keep; ++k) mask[order[k]] = 1;
  return mask;
}

// Closed-form least squares of  1 / coarse_up  ~  b + a * mono  over the mask.
inline AffineDepthFit fit_affine(const ScalarMap& coarse_up, const ScalarMap& mono,
                                 const BinaryMask& mask) {
  if (!coarse_up.same_shape(mono) || !coarse_up.same_shape(mask)) {
    throw ValidationError("fit_affine: inputs differ in size");
  }
  double n = 0.0, sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const double d = coarse_up[i];
    const double m = mono[i];
    if (!(d > 0.0) || !std::isfinite(d) || !std::isfinite(m)) {
      throw ValidationError("fit_affine: coarse depth must be positive and finite on the mask");
    }
    const double t = 1.0 / d;
    n += 1.0;
    sx += m;
    sy += t;
    sxx += m * m;
    sxy += m * t;
  }
  if (n < 2.0) throw DegenerateFitError("fit_affine: fewer than two masked pixels");
  // Centered normal equations are better conditioned than the raw 2x2 system.
  const double mx = sx / n, my = sy / n;
  double cxx = 0.0, cxy = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const double dx = mono[i] - mx;
    cxx += dx * dx;
    cxy += dx * (1.0 / coarse_up[i] - my);
  }
  if (!(cxx > 1e-300) || cxx <= 1e-14 * std::max(sxx, 1e-300)) {
    throw DegenerateFitError("fit_affine: mono-depth is constant over the mask");
  }
  AffineDepthFit fit;
  fit.scale = cxy / cxx;
  fit.shift = my - fit.scale * mx;
  fit.mask = mask;
  fit.retained_fraction = n / static_cast<double>(mask.size());

  std::size_t bad = 0;
  for (double m : mono.data()) {
    if (!(fit.shift + fit.scale * m > 0.0)) ++bad;
  }
  if (bad > 0) {
    throw NonPositiveDepthError("fit_affine: aligned depth is non-positive at " +
                                    std::to_string(bad) + " pixels",
                                bad);
  }
  return fit;
}

// D_h = 1 / (b + a * mono)
inline ScalarMap apply_fit(const ScalarMap& mono, const AffineDepthFit& fit) {
  ScalarMap out(mono.width(), mono.height());
  std::size_t bad = 0;
  for (std::size_t i = 0; i < mono.size(); ++i) {
    const double den = fit.shift + fit.scale * mono[i];
    if (!(den > 0.0)) {
      ++bad;
      continue;
    }
    out[i] = 1.0 / den;
  }
  if (bad > 0) {
    throw NonPositiveDepthError("apply_fit: non-positive denominator at " + std::to_string(bad) +
                                    " pixels",
                                bad);
  }
  return out;
}

struct DepthAlignResult {
  AffineDepthFit fit;
  ScalarMap aligned_depth;
};

// Full per-view alignment: upsample coarse depth and max-confidence to the
// mono resolution, keep the top-P confident pixels, fit, apply.
inline DepthAlignResult align_view_depth(const ScalarMap& coarse_depth,
                                         const std::vector<ScalarMap>& confidences,
                                         const ScalarMap& mono, double p) {
  const ScalarMap conf = build_confidence(confidences);
  const ScalarMap conf_up = upsample_bilinear(conf, mono.width(), mono.height());
  const ScalarMap coarse_up = upsample_bilinear(coarse_depth, mono.width(), mono.height());
  const BinaryMask mask = top_p_mask(conf_up, p);
  AffineDepthFit fit = fit_affine(coarse_up, mono, mask);
  fit.retained_fraction = p;
  ScalarMap aligned = apply_fit(mono, fit);
  return {std::move(fit), std::move(aligned)};
}

}  // namespace d2t
