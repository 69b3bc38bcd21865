#include "slap/augment.hpp"

#include <algorithm>
#include <cmath>

namespace slap::augment {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Focal length for the perspective tilt, in units of the source sign size.
// Large enough that a 30 degree tilt keeps anamorphic stretch mild.
constexpr double kPerspectiveFocal = 3.0;

struct Style {
  double body[3];
  int glyph;  // 0 hbar, 1 disc, 2 diag, 3 ring, 4 vbar, 5 disc_dark, 6 twin_bars, 7 hbar_dark
  double glyph_color[3];
};

const Style kStyles[kNumSignClasses] = {
    {{0.72, 0.08, 0.08}, 0, {0.95, 0.95, 0.95}},  // stop: red, white band
    // faded stop: same layout, washed-out body. Deliberately the confusable
    // neighbour every real sign corpus has; separated from the stop only by
    // a chroma offset orthogonal to the brightness jitter.
    {{0.72, 0.19, 0.19}, 0, {0.95, 0.95, 0.95}},
    {{0.92, 0.80, 0.10}, 2, {0.10, 0.10, 0.10}},
    {{0.92, 0.92, 0.92}, 3, {0.80, 0.10, 0.10}},
    {{0.10, 0.55, 0.20}, 4, {0.95, 0.95, 0.95}},
    {{0.95, 0.50, 0.10}, 5, {0.10, 0.10, 0.10}},
    {{0.55, 0.15, 0.60}, 6, {0.95, 0.95, 0.95}},
    {{0.10, 0.65, 0.70}, 7, {0.10, 0.10, 0.10}},
};

// Octagon "norm": max projection onto the eight edge normals, scaled so the
// boundary sits at 1. Normals face the axes and diagonals.
double octagon_norm(double dx, double dy, double apothem) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double axis = std::max(ax, ay);
  const double diag = (ax + ay) / std::sqrt(2.0);
  return std::max(axis, diag) / apothem;
}

bool glyph_hit(int glyph, double u, double v) {
  switch (glyph) {
    case 0: return std::abs(v) < 0.22;
    case 1: return u * u + v * v < 0.45 * 0.45;
    case 2: return std::abs(u + v) < 0.30;
    case 3: {
      const double r = std::sqrt(u * u + v * v);
      return r > 0.35 && r < 0.55;
    }
    case 4: return std::abs(u) < 0.22;
    case 5: return u * u + v * v < 0.40 * 0.40;
    case 6: return std::abs(std::abs(u) - 0.35) < 0.12;
    case 7: return std::abs(v) < 0.20;
    default: return false;
  }
}

imaging::Homography sign_to_scene(const TransformParams& p, int n,
                                  const std::array<std::array<double, 2>, 8>& octagon) {
  using imaging::Homography;
  const double c = (n - 1) / 2.0;
  Homography h0 = Homography::translation(-c, -c)
                      .then(Homography::rotation_deg(p.rotation, 0, 0))
                      .then(Homography::perspective_deg(p.perspective_x, p.perspective_y, 0, 0,
                                                        kPerspectiveFocal * n));
  // Normalize so the transformed polygon's bbox height equals sign_size and
  // its bbox center lands on the placement point.
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& v : octagon) {
    double tx, ty;
    h0.apply(v[0], v[1], tx, ty);
    x0 = std::min(x0, tx);
    x1 = std::max(x1, tx);
    y0 = std::min(y0, ty);
    y1 = std::max(y1, ty);
  }
  const double sy = p.sign_size / (y1 - y0);
  const double sx = sy * p.aspect_squeeze;
  Homography h = h0.then(Homography::scale(sx, sy));
  const double cx = 0.5 * (x0 + x1) * sx;
  const double cy = 0.5 * (y0 + y1) * sy;
  return h.then(Homography::translation(p.place_x - cx, p.place_y - cy));
}

void draw_post(Image& scene, const Image& post, double center_x, double top_y, double sign_w) {
  const int bh = scene.height(), bw = scene.width();
  const int pw = std::max(1, static_cast<int>(std::lround(0.06 * sign_w)));
  const int x0 = std::clamp(static_cast<int>(std::lround(center_x)) - pw / 2, 0, bw - 1);
  const int x1 = std::min(bw - 1, x0 + pw - 1);
  const int y0 = std::clamp(static_cast<int>(std::lround(top_y)), 0, bh - 1);
  for (int y = y0; y < bh; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double ty = static_cast<double>(y - y0) / std::max(1, bh - 1 - y0);
      const double tx = static_cast<double>(x - x0) / std::max(1, pw - 1);
      const int py = std::min(post.height() - 1, static_cast<int>(ty * post.height()));
      const int px = std::min(post.width() - 1, static_cast<int>(tx * post.width()));
      for (int c = 0; c < 3; ++c) scene.at(y, x, c) = post.at(py, px, c);
    }
}

Scene compose_impl(const Image& background, const Image& sign, const Image& post,
                   const TransformParams& p, ComposeTape* tape, int label, int background_id) {
  p.validate();
  if (sign.height() != sign.width()) throw DimensionMismatch("sign must be square");
  if (!sign.has_alpha()) throw DimensionMismatch("sign needs an alpha mask");
  if (background.height() < 104 || background.width() < 104)
    throw DimensionMismatch("background must be at least 104x104");

  const int n = sign.height();
  const int bh = background.height(), bw = background.width();
  auto octagon = sign_octagon(n);
  imaging::Homography h = sign_to_scene(p, n, octagon);

  Scene scene;
  scene.params = p;
  scene.label = label;
  scene.background_id = background_id;
  double bottom_y = -1e300;
  for (size_t i = 0; i < octagon.size(); ++i) {
    double tx, ty;
    h.apply(octagon[i][0], octagon[i][1], tx, ty);
    if (tx < 0.0 || tx > bw - 1.0 || ty < 0.0 || ty > bh - 1.0)
      throw SignOutOfBounds("sign polygon exits the frame");
    scene.sign_polygon[i] = {tx, ty};
    bottom_y = std::max(bottom_y, ty);
  }

  Image out = background;
  out.alpha_plane().clear();
  draw_post(out, post, p.place_x, bottom_y, p.sign_size * p.aspect_squeeze);

  Image adjusted = imaging::adjust_luma(sign, p.luma_delta);
  Image warped = imaging::warp(adjusted, h, bh, bw);
  if (tape) {
    tape->sign = sign;
    tape->sign_adjusted = adjusted;
    tape->h = h;
    tape->luma_delta = p.luma_delta;
    tape->clamped.assign(out.data().size(), 0);
  }
  for (int y = 0; y < bh; ++y)
    for (int x = 0; x < bw; ++x) {
      const double a = warped.alpha_or(y, x);
      for (int c = 0; c < 3; ++c) {
        const double v = out.at(y, x, c) * (1.0 - a) + warped.at(y, x, c);
        const double clamped = std::clamp(v, 0.0, 1.0);
        if (tape && clamped != v)
          tape->clamped[(static_cast<size_t>(y) * bw + x) * 3 + c] = 1;
        out.at(y, x, c) = clamped;
      }
    }
  scene.image = std::move(out);
  return scene;
}

}  // namespace

void TransformParams::validate() const {
  auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
  if (!in(perspective_x, -30.0, 30.0) || !in(perspective_y, -30.0, 30.0))
    throw ConfigError("perspective angle out of [-30,30]");
  if (!in(rotation, -5.0, 5.0)) throw ConfigError("rotation out of [-5,5]");
  if (!in(luma_delta, -13.0 / 255, 13.0 / 255)) throw ConfigError("luma_delta out of range");
  if (!in(sign_size, 25.0, 90.0)) throw ConfigError("sign_size out of [25,90]");
  if (!in(aspect_squeeze, 0.75, 1.0)) throw ConfigError("aspect_squeeze out of [3/4,1]");
}

std::array<std::array<double, 2>, 8> sign_octagon(int n) {
  const double c = (n - 1) / 2.0;
  const double r = c / std::cos(kPi / 8.0);  // flat sides touch the square edges
  std::array<std::array<double, 2>, 8> v{};
  for (int k = 0; k < 8; ++k) {
    const double a = (22.5 + 45.0 * k) * kPi / 180.0;
    v[k] = {c + r * std::cos(a), c + r * std::sin(a)};
  }
  return v;
}

Image render_sign(int class_id, int size) {
  if (class_id < 0 || class_id >= kNumSignClasses) throw ConfigError("bad sign class");
  if (size < 8) throw DimensionMismatch("sign size too small");
  const Style& st = kStyles[class_id];
  const double c = (size - 1) / 2.0;
  Image img(size, size);
  img.ensure_alpha(0.0);
  const int ss = 3;  // supersampling per axis for soft octagon edges
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double cover = 0.0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double px = x + (sx + 0.5) / ss - 0.5;
          const double py = y + (sy + 0.5) / ss - 0.5;
          if (octagon_norm(px - c, py - c, c) <= 1.0) cover += 1.0;
        }
      cover /= ss * ss;
      img.alpha(y, x) = cover;
      if (cover == 0.0) continue;
      static constexpr double kBorder[3] = {0.95, 0.95, 0.95};
      const double f = octagon_norm(x - c, y - c, c);
      const double u = (x - c) / c, v = (y - c) / c;
      const double* col;
      if (f > 0.86)
        col = kBorder;
      else if (glyph_hit(st.glyph, u, v))
        col = st.glyph_color;
      else
        col = st.body;
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = col[ch];
    }
  return img;
}

Image make_background(int h, int w, uint64_t seed) {
  Rng rng(seed ^ 0x6261636b67726eULL);
  Image img(h, w);
  const double horizon = h * rng.uniform(0.35, 0.5);
  const double sky_top[3] = {rng.uniform(0.45, 0.6), rng.uniform(0.6, 0.75), rng.uniform(0.85, 0.98)};
  const double sky_bot[3] = {0.8, 0.85, 0.95};
  const double grass[3] = {rng.uniform(0.2, 0.3), rng.uniform(0.45, 0.55), rng.uniform(0.15, 0.25)};
  const double road_gray = rng.uniform(0.3, 0.42);
  const double road_cx = w * rng.uniform(0.4, 0.6);
  const double road_half_bottom = w * rng.uniform(0.25, 0.4);
  const double dash_period = rng.uniform(8.0, 14.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double col[3];
      if (y < horizon) {
        const double t = y / std::max(1.0, horizon);
        for (int c = 0; c < 3; ++c) col[c] = sky_top[c] * (1 - t) + sky_bot[c] * t;
      } else {
        const double t = (y - horizon) / std::max(1.0, h - horizon);  // 0 horizon, 1 bottom
        const double half = road_half_bottom * (0.12 + 0.88 * t);
        if (std::abs(x - road_cx) < half) {
          for (int c = 0; c < 3; ++c) col[c] = road_gray * (0.9 + 0.2 * t);
          // dashed center line
          if (std::abs(x - road_cx) < std::max(1.0, half * 0.04) &&
              std::fmod(y, dash_period) < dash_period * 0.5)
            for (int c = 0; c < 3; ++c) col[c] = 0.85;
        } else {
          for (int c = 0; c < 3; ++c) col[c] = grass[c] * (0.85 + 0.3 * t);
        }
      }
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = std::clamp(col[c] + rng.normal(0.0, 0.01), 0.0, 1.0);
    }
  return img;
}

Image make_post_texture() {
  Image post(8, 3);
  Rng rng(0x706f7374ULL);
  for (int y = 0; y < post.height(); ++y)
    for (int x = 0; x < post.width(); ++x) {
      const double g = 0.45 + 0.05 * rng.uniform(-1, 1);
      for (int c = 0; c < 3; ++c) post.at(y, x, c) = g;
    }
  return post;
}

TransformParams sample_params(Rng& rng, int bg_h, int bg_w, const ParamRanges& r) {
  TransformParams p;
  p.perspective_x = rng.uniform(-r.perspective_limit, r.perspective_limit);
  // Viewing from below-left of a mounted sign tilts it this way most often.
  if (rng.uniform() < r.perspective_y_pos_prob)
    p.perspective_y = rng.uniform(0.0, r.perspective_limit);
  else
    p.perspective_y = rng.uniform(-r.perspective_limit, 0.0);
  p.rotation = rng.uniform(-r.rotation_limit, r.rotation_limit);
  p.luma_delta = rng.uniform(-r.luma_limit, r.luma_limit);
  p.sign_size = rng.uniform(r.min_size, r.max_size);
  p.aspect_squeeze = rng.uniform(r.squeeze_min, 1.0);
  // Margin covers the worst-case bbox width after perspective stretch.
  const double mx = std::min(0.62 * p.sign_size + 1.0, (bg_w - 1) / 2.0 - 0.5);
  const double my = std::min(0.51 * p.sign_size + 1.0, (bg_h - 1) / 2.0 - 0.5);
  p.place_x = rng.uniform(mx, bg_w - 1 - mx);
  p.place_y = rng.uniform(my, bg_h - 1 - my);
  return p;
}

Scene compose(const Image& background, const Image& sign, const Image& post,
              const TransformParams& p, int label, int background_id) {
  return compose_impl(background, sign, post, p, nullptr, label, background_id);
}

Scene compose_traced(const Image& background, const Image& sign, const Image& post,
                     const TransformParams& p, ComposeTape& tape, int label, int background_id) {
  return compose_impl(background, sign, post, p, &tape, label, background_id);
}

Image compose_vjp(const ComposeTape& tape, const Image& grad_scene) {
  Image masked = grad_scene;
  for (size_t i = 0; i < masked.data().size(); ++i)
    if (tape.clamped[i]) masked.data()[i] = 0.0;
  Image g_adjusted = imaging::warp_vjp(tape.sign_adjusted, tape.h, masked);
  return imaging::adjust_luma_vjp(tape.sign, tape.luma_delta, g_adjusted);
}

Image crop_sign(const Scene& scene, int out_size, double margin, CropTape* tape) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& v : scene.sign_polygon) {
    x0 = std::min(x0, v[0]);
    x1 = std::max(x1, v[0]);
    y0 = std::min(y0, v[1]);
    y1 = std::max(y1, v[1]);
  }
  const double mw = margin * (x1 - x0), mh = margin * (y1 - y0);
  x0 -= mw;
  x1 += mw;
  y0 -= mh;
  y1 += mh;
  using imaging::Homography;
  Homography h = Homography::translation(-x0, -y0)
                     .then(Homography::scale((out_size - 1) / (x1 - x0), (out_size - 1) / (y1 - y0)));
  Image crop = imaging::warp(scene.image, h, out_size, out_size);
  crop.alpha_plane().clear();
  if (tape) {
    tape->h = h;
    tape->scene_h = scene.image.height();
    tape->scene_w = scene.image.width();
    tape->clamped.assign(crop.data().size(), 0);
    for (size_t i = 0; i < crop.data().size(); ++i)
      if (crop.data()[i] < 0.0 || crop.data()[i] > 1.0) tape->clamped[i] = 1;
  }
  crop.clamp01();
  return crop;
}

Image crop_sign_vjp(const CropTape& tape, const Image& grad_crop) {
  Image masked = grad_crop;
  for (size_t i = 0; i < masked.data().size(); ++i)
    if (tape.clamped[i]) masked.data()[i] = 0.0;
  Image src(tape.scene_h, tape.scene_w);
  return imaging::warp_vjp(src, tape.h, masked);
}

Image adversarial_sign(const projmodel::ProjectionModel& model, const Image& surface,
                       const Image& w_grid) {
  Image proj = imaging::grid_upsample(w_grid, surface.height(), surface.width());
  Image out = model.predict_image(surface, proj);
  out.alpha_plane() = surface.alpha_plane();
  return out;
}

Scene compose_with_retries(const Image& background, const Image& sign, const Image& post,
                           TransformParams p, Rng& rng, int label, int background_id,
                           int max_retries) {
  for (int attempt = 0;; ++attempt) {
    try {
      return compose(background, sign, post, p, label, background_id);
    } catch (const SignOutOfBounds&) {
      if (attempt >= max_retries) throw;
      const double mx = std::min(0.62 * p.sign_size + 1.0, (background.width() - 1) / 2.0 - 0.5);
      const double my = std::min(0.51 * p.sign_size + 1.0, (background.height() - 1) / 2.0 - 0.5);
      p.place_x = rng.uniform(mx, background.width() - 1 - mx);
      p.place_y = rng.uniform(my, background.height() - 1 - my);
    }
  }
}

Scene compose_traced_with_retries(const Image& background, const Image& sign, const Image& post,
                                  TransformParams p, Rng& rng, ComposeTape& tape, int label,
                                  int background_id, int max_retries) {
  for (int attempt = 0;; ++attempt) {
    try {
      return compose_traced(background, sign, post, p, tape, label, background_id);
    } catch (const SignOutOfBounds&) {
      if (attempt >= max_retries) throw;
      const double mx = std::min(0.62 * p.sign_size + 1.0, (background.width() - 1) / 2.0 - 0.5);
      const double my = std::min(0.51 * p.sign_size + 1.0, (background.height() - 1) / 2.0 - 0.5);
      p.place_x = rng.uniform(mx, background.width() - 1 - mx);
      p.place_y = rng.uniform(my, background.height() - 1 - my);
    }
  }
}

std::vector<Scene> make_batch(const projmodel::ProjectionModel& model, const Image& surface,
                              const Image& w_grid, const std::vector<Image>& backgrounds,
                              Rng& rng, int batch_size, const ParamRanges& ranges) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (backgrounds.empty()) throw ConfigError("no backgrounds");
  Image sign = adversarial_sign(model, surface, w_grid);
  Image post = make_post_texture();
  std::vector<Scene> scenes;
  scenes.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const int bg = rng.uniform_int(0, static_cast<int>(backgrounds.size()) - 1);
    TransformParams p = sample_params(rng, backgrounds[bg].height(), backgrounds[bg].width(), ranges);
    scenes.push_back(compose_with_retries(backgrounds[bg], sign, post, p, rng, kStopClass, bg));
  }
  return scenes;
}

namespace {

Image bilinear_rescale(const Image& img, int out_n) {
  Image out(out_n, out_n);
  const double sy = static_cast<double>(img.height()) / out_n;
  const double sx = static_cast<double>(img.width()) / out_n;
  for (int y = 0; y < out_n; ++y)
    for (int x = 0; x < out_n; ++x) {
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
      const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
      const int y1 = std::min(y0 + 1, img.height() - 1), x1 = std::min(x0 + 1, img.width() - 1);
      const double wy = fy - y0, wx = fx - x0;
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = (1 - wy) * ((1 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c)) +
                          wy * ((1 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c));
    }
  return out;
}

}  // namespace

std::vector<LabeledImage> classifier_dataset(int n_per_class, uint64_t seed, int n_classes) {
  if (n_classes < 2 || n_classes > kNumSignClasses) throw ConfigError("bad class count");
  Rng rng(seed);
  Image post = make_post_texture();
  ParamRanges ranges;
  ranges.max_size = 80.0;  // must fit the 104 px backgrounds with headroom
  std::vector<LabeledImage> out;
  out.reserve(static_cast<size_t>(n_per_class) * n_classes);
  std::vector<Image> signs;
  for (int c = 0; c < n_classes; ++c) signs.push_back(render_sign(c, 64));
  for (int i = 0; i < n_per_class; ++i)
    for (int c = 0; c < n_classes; ++c) {
      Image bg = make_background(104, 104, rng.next_u64());
      TransformParams p = sample_params(rng, bg.height(), bg.width(), ranges);
      Scene scene = compose_with_retries(bg, signs[c], post, p, rng, c, 0);
      // jittered crop margin: the classifier must tolerate the scale/offset
      // wobble of real crops (and of resize-style preprocessing defences)
      Image crop = crop_sign(scene, 32, rng.uniform(0.1, 0.35));
      // occasional down-up resample: tolerance to interpolation blur
      if (rng.uniform() < 1.0 / 3.0) {
        const int s = rng.uniform_int(26, 31);
        crop = bilinear_rescale(bilinear_rescale(crop, s), 32);
      }
      out.push_back({std::move(crop), c});
    }
  return out;
}

std::array<double, 4> polygon_bbox_norm(const Scene& scene) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& v : scene.sign_polygon) {
    x0 = std::min(x0, v[0]);
    x1 = std::max(x1, v[0]);
    y0 = std::min(y0, v[1]);
    y1 = std::max(y1, v[1]);
  }
  const double w = scene.image.width(), h = scene.image.height();
  return {x0 / w, y0 / h, (x1 - x0) / w, (y1 - y0) / h};
}

std::vector<DetectorExample> detector_dataset(int n, uint64_t seed, double empty_fraction) {
  Rng rng(seed);
  Image post = make_post_texture();
  ParamRanges ranges;
  ranges.max_size = 85.0;
  ParamRanges small = ranges;
  small.max_size = 45.0;
  std::vector<DetectorExample> out;
  out.reserve(n);
  std::vector<Image> signs;
  for (int c = 0; c < kNumSignClasses; ++c) signs.push_back(render_sign(c, 64));
  for (int i = 0; i < n; ++i) {
    DetectorExample ex;
    Image bg = make_background(104, 104, rng.next_u64());
    if (rng.uniform() < empty_fraction) {
      ex.image = std::move(bg);
      ex.has_sign = false;
    } else {
      const int c = rng.uniform_int(0, kNumSignClasses - 1);
      // distant signs are the hard cases, give them extra weight
      const bool bias_small = rng.uniform() < 0.4;
      TransformParams p = sample_params(rng, bg.height(), bg.width(), bias_small ? small : ranges);
      Scene scene = compose_with_retries(bg, signs[c], post, p, rng, c, 0);
      ex.image = std::move(scene.image);
      ex.has_sign = true;
      ex.box = polygon_bbox_norm(scene);
      ex.label = c;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace slap::augment
