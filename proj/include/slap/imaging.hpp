#pragma once

#include <array>

#include "slap/image.hpp"

namespace slap::imaging {

/// 3x3 homography, bottom-right entry kept at 1. Row-major.
class Homography {
 public:
  Homography() : m_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}
  explicit Homography(const std::array<double, 9>& m);

  double operator()(int r, int c) const { return m_[r * 3 + c]; }
  const std::array<double, 9>& coeffs() const { return m_; }

  Homography inverse() const;  // throws SingularHomography
  Homography then(const Homography& next) const;  // next * this
  void apply(double x, double y, double& ox, double& oy) const;

  static Homography identity() { return Homography(); }
  static Homography translation(double tx, double ty);
  static Homography scale(double sx, double sy);
  static Homography rotation_deg(double degrees, double cx, double cy);
  /// Perspective tilt: rotate the image plane by the given angles (degrees)
  /// about the x/y axes through (cx, cy), viewed with focal length f.
  static Homography perspective_deg(double angle_x, double angle_y, double cx, double cy, double f);

 private:
  std::array<double, 9> m_;
};

// Color space (full-range JPEG YCrCb; channel order Y, Cr, Cb).
Image rgb_to_ycrcb(const Image& img);
Image ycrcb_to_rgb(const Image& img);

/// Shift the luma channel by delta (in [0,1] units) with clamping in YCrCb
/// and again after the return trip to RGB.
Image adjust_luma(const Image& img, double delta);
/// Gradient of a scalar through adjust_luma: passes wherever no clamp fired.
Image adjust_luma_vjp(const Image& img, double delta, const Image& grad_out);

/// Inverse-mapped bicubic (Catmull-Rom) warp. Color is premultiplied by the
/// source alpha before sampling; taps outside the source contribute nothing,
/// so the output alpha encodes coverage. Output color stays premultiplied.
Image warp(const Image& img, const Homography& h, int out_h, int out_w);
/// Backprop to the source color channels (alpha treated as constant).
Image warp_vjp(const Image& img, const Homography& h, const Image& grad_out);

/// Anisotropic total variation normalized by pixel count.
double total_variation(const Image& img);
Image total_variation_vjp(const Image& img);

/// Nearest-neighbor upsampling of an n x n grid variable to render size.
Image grid_upsample(const Image& grid, int out_h, int out_w);
/// Backprop of grid_upsample: per-cell sum of the incoming gradient.
Image grid_upsample_vjp(const Image& grad_out, int n);
/// Snap an image to an n x n grid of constant cells (cell mean).
Image grid_quantize(const Image& img, int n);

}  // namespace slap::imaging
