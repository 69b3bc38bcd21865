#include "slap/imaging.hpp"

#include <cmath>

namespace slap::imaging {

namespace {

constexpr double kKr = 0.299;
constexpr double kKb = 0.114;
constexpr double kKg = 1.0 - kKr - kKb;

constexpr double kDet3Eps = 1e-12;

double det3(const std::array<double, 9>& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

// Catmull-Rom cubic kernel (a = -0.5).
double cubic_kernel(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

}  // namespace

Homography::Homography(const std::array<double, 9>& m) : m_(m) {
  if (std::abs(m_[8]) < kDet3Eps) throw SingularHomography("h33 is zero");
  for (auto& v : m_) v /= m[8];
  if (std::abs(det3(m_)) < kDet3Eps) throw SingularHomography("determinant is zero");
}

Homography Homography::inverse() const {
  const auto& m = m_;
  const double d = det3(m);
  if (std::abs(d) < kDet3Eps) throw SingularHomography("determinant is zero");
  std::array<double, 9> inv{
      (m[4] * m[8] - m[5] * m[7]) / d, (m[2] * m[7] - m[1] * m[8]) / d,
      (m[1] * m[5] - m[2] * m[4]) / d, (m[5] * m[6] - m[3] * m[8]) / d,
      (m[0] * m[8] - m[2] * m[6]) / d, (m[2] * m[3] - m[0] * m[5]) / d,
      (m[3] * m[7] - m[4] * m[6]) / d, (m[1] * m[6] - m[0] * m[7]) / d,
      (m[0] * m[4] - m[1] * m[3]) / d};
  return Homography(inv);
}

Homography Homography::then(const Homography& next) const {
  const auto& a = next.m_;
  const auto& b = m_;
  std::array<double, 9> r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return Homography(r);
}

void Homography::apply(double x, double y, double& ox, double& oy) const {
  const auto& m = m_;
  const double wdiv = m[6] * x + m[7] * y + m[8];
  ox = (m[0] * x + m[1] * y + m[2]) / wdiv;
  oy = (m[3] * x + m[4] * y + m[5]) / wdiv;
}

Homography Homography::translation(double tx, double ty) {
  return Homography({1, 0, tx, 0, 1, ty, 0, 0, 1});
}

Homography Homography::scale(double sx, double sy) {
  return Homography({sx, 0, 0, 0, sy, 0, 0, 0, 1});
}

Homography Homography::rotation_deg(double degrees, double cx, double cy) {
  const double r = degrees * M_PI / 180.0;
  const double c = std::cos(r), s = std::sin(r);
  return translation(-cx, -cy).then(Homography({c, -s, 0, s, c, 0, 0, 0, 1})).then(translation(cx, cy));
}

Homography Homography::perspective_deg(double angle_x, double angle_y, double cx, double cy, double f) {
  const double ax = angle_x * M_PI / 180.0;
  const double ay = angle_y * M_PI / 180.0;
  // Plane points (x, y, 0) rotated about the y then x axis, projected with
  // a pinhole at distance f.
  const double cax = std::cos(ax), sax = std::sin(ax);
  const double cay = std::cos(ay), say = std::sin(ay);
  // Rotation Rx * Ry applied to (x, y, 0):
  //   X = cay*x
  //   Y = sax*say*x + cax*y
  //   Z = -cax*say*x + sax*y
  // Projection: (f*X/(f+Z), f*Y/(f+Z)).
  std::array<double, 9> m{
      f * cay,           0,        0,
      f * sax * say,     f * cax,  0,
      -cax * say,        sax,      f};
  Homography persp(m);
  return translation(-cx, -cy).then(persp).then(translation(cx, cy));
}

Image rgb_to_ycrcb(const Image& img) {
  Image out(img.height(), img.width());
  const auto& in = img.data();
  auto& o = out.data();
  for (size_t i = 0; i < in.size(); i += 3) {
    const double r = in[i], g = in[i + 1], b = in[i + 2];
    const double y = kKr * r + kKg * g + kKb * b;
    o[i] = y;
    o[i + 1] = (r - y) / (2.0 * (1.0 - kKr)) + 0.5;
    o[i + 2] = (b - y) / (2.0 * (1.0 - kKb)) + 0.5;
  }
  if (img.has_alpha()) out.alpha_plane() = img.alpha_plane();
  return out;
}

Image ycrcb_to_rgb(const Image& img) {
  Image out(img.height(), img.width());
  const auto& in = img.data();
  auto& o = out.data();
  for (size_t i = 0; i < in.size(); i += 3) {
    const double y = in[i], cr = in[i + 1] - 0.5, cb = in[i + 2] - 0.5;
    const double r = y + 2.0 * (1.0 - kKr) * cr;
    const double b = y + 2.0 * (1.0 - kKb) * cb;
    const double g = (y - kKr * r - kKb * b) / kKg;
    o[i] = r;
    o[i + 1] = g;
    o[i + 2] = b;
  }
  if (img.has_alpha()) out.alpha_plane() = img.alpha_plane();
  return out;
}

Image adjust_luma(const Image& img, double delta) {
  Image ycc = rgb_to_ycrcb(img);
  auto& d = ycc.data();
  for (size_t i = 0; i < d.size(); i += 3) d[i] = std::clamp(d[i] + delta, 0.0, 1.0);
  Image out = ycrcb_to_rgb(ycc);
  for (auto& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Image adjust_luma_vjp(const Image& img, double delta, const Image& grad_out) {
  if (!img.same_size(grad_out)) throw DimensionMismatch("adjust_luma_vjp sizes differ");
  // Adding delta to Y adds delta to every RGB channel, so away from clamps
  // the map is the identity shift and the Jacobian is the identity.
  Image grad(img.height(), img.width());
  const auto& in = img.data();
  auto& g = grad.data();
  for (size_t i = 0; i < in.size(); i += 3) {
    const double r = in[i], gg = in[i + 1], b = in[i + 2];
    const double y = kKr * r + kKg * gg + kKb * b;
    const double ys = y + delta;
    const bool y_clamped = ys < 0.0 || ys > 1.0;
    for (int c = 0; c < 3; ++c) {
      const double v = in[i + c] + delta;
      const bool rgb_clamped = v < 0.0 || v > 1.0;
      g[i + c] = (y_clamped || rgb_clamped) ? 0.0 : grad_out.data()[i + c];
    }
  }
  return grad;
}

Image warp(const Image& img, const Homography& h, int out_h, int out_w) {
  const Homography inv = h.inverse();
  Image out(out_h, out_w);
  out.ensure_alpha(0.0);
  const int sh = img.height(), sw = img.width();
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      double sx, sy;
      inv.apply(static_cast<double>(x), static_cast<double>(y), sx, sy);
      const int ix = static_cast<int>(std::floor(sx));
      const int iy = static_cast<int>(std::floor(sy));
      double acc[3] = {0, 0, 0};
      double acc_a = 0.0;
      for (int dy = -1; dy <= 2; ++dy) {
        const int py = iy + dy;
        if (py < 0 || py >= sh) continue;
        const double ky = cubic_kernel(sy - py);
        if (ky == 0.0) continue;
        for (int dx = -1; dx <= 2; ++dx) {
          const int px = ix + dx;
          if (px < 0 || px >= sw) continue;
          const double k = ky * cubic_kernel(sx - px);
          if (k == 0.0) continue;
          const double a = img.alpha_or(py, px);
          for (int c = 0; c < 3; ++c) acc[c] += k * img.at(py, px, c) * a;
          acc_a += k * a;
        }
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = acc[c];
      out.alpha(y, x) = std::clamp(acc_a, 0.0, 1.0);
    }
  }
  return out;
}

Image warp_vjp(const Image& img, const Homography& h, const Image& grad_out) {
  const Homography inv = h.inverse();
  Image grad(img.height(), img.width());
  const int sh = img.height(), sw = img.width();
  for (int y = 0; y < grad_out.height(); ++y) {
    for (int x = 0; x < grad_out.width(); ++x) {
      double sx, sy;
      inv.apply(static_cast<double>(x), static_cast<double>(y), sx, sy);
      const int ix = static_cast<int>(std::floor(sx));
      const int iy = static_cast<int>(std::floor(sy));
      for (int dy = -1; dy <= 2; ++dy) {
        const int py = iy + dy;
        if (py < 0 || py >= sh) continue;
        const double ky = cubic_kernel(sy - py);
        if (ky == 0.0) continue;
        for (int dx = -1; dx <= 2; ++dx) {
          const int px = ix + dx;
          if (px < 0 || px >= sw) continue;
          const double k = ky * cubic_kernel(sx - px);
          if (k == 0.0) continue;
          const double a = img.alpha_or(py, px);
          for (int c = 0; c < 3; ++c) grad.at(py, px, c) += k * a * grad_out.at(y, x, c);
        }
      }
    }
  }
  return grad;
}

double total_variation(const Image& img) {
  double tv = 0.0;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        if (x + 1 < img.width()) tv += std::abs(img.at(y, x + 1, c) - img.at(y, x, c));
        if (y + 1 < img.height()) tv += std::abs(img.at(y + 1, x, c) - img.at(y, x, c));
      }
  return tv / static_cast<double>(img.pixels());
}

Image total_variation_vjp(const Image& img) {
  Image grad(img.height(), img.width());
  const double norm = 1.0 / static_cast<double>(img.pixels());
  auto sgn = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        if (x + 1 < img.width()) {
          const double s = sgn(img.at(y, x + 1, c) - img.at(y, x, c)) * norm;
          grad.at(y, x + 1, c) += s;
          grad.at(y, x, c) -= s;
        }
        if (y + 1 < img.height()) {
          const double s = sgn(img.at(y + 1, x, c) - img.at(y, x, c)) * norm;
          grad.at(y + 1, x, c) += s;
          grad.at(y, x, c) -= s;
        }
      }
  return grad;
}

Image grid_upsample(const Image& grid, int out_h, int out_w) {
  const int n = grid.height();
  if (n < 1 || grid.width() != n) throw InvalidGrid("grid variable must be square, n >= 1");
  Image out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const int gy = std::min(n - 1, y * n / out_h);
    for (int x = 0; x < out_w; ++x) {
      const int gx = std::min(n - 1, x * n / out_w);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = grid.at(gy, gx, c);
    }
  }
  return out;
}

Image grid_upsample_vjp(const Image& grad_out, int n) {
  if (n < 1) throw InvalidGrid("n must be >= 1");
  Image grad(n, n);
  const int oh = grad_out.height(), ow = grad_out.width();
  for (int y = 0; y < oh; ++y) {
    const int gy = std::min(n - 1, y * n / oh);
    for (int x = 0; x < ow; ++x) {
      const int gx = std::min(n - 1, x * n / ow);
      for (int c = 0; c < 3; ++c) grad.at(gy, gx, c) += grad_out.at(y, x, c);
    }
  }
  return grad;
}

Image grid_quantize(const Image& img, int n) {
  if (n < 1) throw InvalidGrid("n must be >= 1");
  Image cells(n, n);
  std::vector<int> counts(static_cast<size_t>(n) * n, 0);
  const int h = img.height(), w = img.width();
  for (int y = 0; y < h; ++y) {
    const int gy = std::min(n - 1, y * n / h);
    for (int x = 0; x < w; ++x) {
      const int gx = std::min(n - 1, x * n / w);
      for (int c = 0; c < 3; ++c) cells.at(gy, gx, c) += img.at(y, x, c);
      ++counts[static_cast<size_t>(gy) * n + gx];
    }
  }
  for (int gy = 0; gy < n; ++gy)
    for (int gx = 0; gx < n; ++gx) {
      const int cnt = counts[static_cast<size_t>(gy) * n + gx];
      if (cnt > 0)
        for (int c = 0; c < 3; ++c) cells.at(gy, gx, c) /= cnt;
    }
  return grid_upsample(cells, h, w);
}

}  // namespace slap::imaging
