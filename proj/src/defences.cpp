#include "slap/defences.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "slap/attack.hpp"
#include "slap/nn.hpp"

namespace slap::defences {

using nlohmann::json;
using Vec = Eigen::VectorXd;

size_t BoolMask::count() const {
  size_t n = 0;
  for (uint8_t v : data) n += v;
  return n;
}

double BoolMask::coverage() const {
  if (data.empty()) return 0.0;
  return static_cast<double>(count()) / data.size();
}

void BoolMask::save_png(const std::string& path) const {
  Image img(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = at(y, x) ? 1.0 : 0.0;
  write_png(img, path);
}

BoolMask BoolMask::load_png(const std::string& path) {
  Image img = read_png(path);
  BoolMask m(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) m.at(y, x) = img.at(y, x, 0) > 0.5 ? 1 : 0;
  return m;
}

namespace {

Image bilinear_resize(const Image& img, int out_h, int out_w) {
  Image out(out_h, out_w);
  const double sy = static_cast<double>(img.height()) / out_h;
  const double sx = static_cast<double>(img.width()) / out_w;
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
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

Image inert_fill(const std::string& pattern, int h, int w, Rng& rng) {
  Image out(h, w);
  if (pattern == "random") {
    for (auto& v : out.data()) v = rng.uniform();
  } else if (pattern == "checkerboard") {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = ((y / 8 + x / 8) % 2 == 0) ? 1.0 : 0.0;
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = v;
      }
  } else {
    throw ConfigError("unknown inert pattern: " + pattern);
  }
  return out;
}

int argmax_class(const targets::Classifier& model, const Image& img, double* confidence) {
  Vec p = model.probabilities(img);
  int best;
  const double conf = p.maxCoeff(&best);
  if (confidence) *confidence = conf;
  return best;
}

/// The raw SentiNet pair for one suspect, plus its salient mask.
std::pair<double, double> sentinet_raw(const targets::Classifier& model, const Image& suspect,
                                       const std::vector<Image>& benign_test,
                                       const std::string& inert_pattern, uint64_t seed,
                                       BoolMask& mask_out) {
  if (benign_test.empty()) throw ConfigError("sentinet needs a nonempty benign test set");
  const int suspect_class = argmax_class(model, suspect, nullptr);
  mask_out = saliency_mask(model, suspect, suspect_class);
  if (mask_out.empty_mask()) return {0.0, 0.0};

  Rng rng(seed ^ 0x73656e74ULL);
  int fooled = 0, candidates = 0;
  double conf_sum = 0.0;
  for (const auto& benign : benign_test) {
    if (benign.height() != suspect.height() || benign.width() != suspect.width())
      throw DimensionMismatch("benign test image size differs from suspect");
    // only images the model does not already assign to the suspect class can
    // be *led* to predict it
    const bool candidate = argmax_class(model, benign, nullptr) != suspect_class;
    candidates += candidate;
    Image overlay = benign;
    Image inert = benign;
    Image pattern = inert_fill(inert_pattern, benign.height(), benign.width(), rng);
    for (int y = 0; y < benign.height(); ++y)
      for (int x = 0; x < benign.width(); ++x) {
        if (!mask_out.at(y, x)) continue;
        for (int c = 0; c < 3; ++c) {
          overlay.at(y, x, c) = suspect.at(y, x, c);
          inert.at(y, x, c) = pattern.at(y, x, c);
        }
      }
    if (candidate && argmax_class(model, overlay, nullptr) == suspect_class) ++fooled;
    double conf = 0.0;
    argmax_class(model, inert, &conf);
    conf_sum += conf;
  }
  const double conf = conf_sum / static_cast<double>(benign_test.size());
  return {conf, candidates > 0 ? static_cast<double>(fooled) / candidates : 0.0};
}

}  // namespace

Image input_randomization(const Image& img, int max_size, Rng& rng) {
  if (img.height() != 32 || img.width() != 32)
    throw DimensionMismatch("input_randomization wants 32x32");
  if (max_size < 32) throw ConfigError("max_size must be >= 32");
  const int s = rng.uniform_int(32, max_size);
  Image resized = (s == 32) ? img : bilinear_resize(img, s, s);
  const int oy = rng.uniform_int(0, max_size - s);
  const int ox = rng.uniform_int(0, max_size - s);
  Image padded(max_size, max_size, 0.0);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int c = 0; c < 3; ++c) padded.at(y + oy, x + ox, c) = resized.at(y, x, c);
  return (max_size == 32) ? padded : bilinear_resize(padded, 32, 32);
}

BoolMask saliency_mask(const targets::Classifier& model, const Image& img, int class_id) {
  const int h = img.height(), w = img.width();
  const int occ = 8, stride = 4;
  const int ny = (h - occ) / stride + 1, nx = (w - occ) / stride + 1;
  const double base = model.probabilities(img)[class_id];

  std::vector<double> drop(static_cast<size_t>(ny) * nx, 0.0);
  for (int gy = 0; gy < ny; ++gy)
    for (int gx = 0; gx < nx; ++gx) {
      Image occluded = img;
      for (int y = gy * stride; y < gy * stride + occ; ++y)
        for (int x = gx * stride; x < gx * stride + occ; ++x)
          for (int c = 0; c < 3; ++c) occluded.at(y, x, c) = 0.5;
      const double score = model.probabilities(occluded)[class_id];
      drop[static_cast<size_t>(gy) * nx + gx] = std::max(0.0, base - score);
    }

  // bilinear accumulation of the stride-4 drop grid to input resolution
  std::vector<double> heat(static_cast<size_t>(h) * w, 0.0);
  const double center = (occ - 1) / 2.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gy = std::clamp((y - center) / stride, 0.0, ny - 1.0);
      const double gx = std::clamp((x - center) / stride, 0.0, nx - 1.0);
      const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
      const int y1 = std::min(y0 + 1, ny - 1), x1 = std::min(x0 + 1, nx - 1);
      const double wy = gy - y0, wx = gx - x0;
      heat[static_cast<size_t>(y) * w + x] =
          (1 - wy) * ((1 - wx) * drop[static_cast<size_t>(y0) * nx + x0] +
                      wx * drop[static_cast<size_t>(y0) * nx + x1]) +
          wy * ((1 - wx) * drop[static_cast<size_t>(y1) * nx + x0] +
                wx * drop[static_cast<size_t>(y1) * nx + x1]);
    }

  // Threshold relative to the strongest drop. A fixed percentile would hand
  // every image a same-sized mask; scaling with the peak keeps masks small for
  // images whose evidence is concentrated (a patch) and large for images whose
  // evidence is spread over the whole object, which is the contrast the
  // threshold curve feeds on.
  const double peak = *std::max_element(heat.begin(), heat.end());
  if (peak < 1e-6) return BoolMask(h, w);
  const double threshold = 0.15 * peak;

  BoolMask above(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) above.at(y, x) = heat[static_cast<size_t>(y) * w + x] >= threshold;

  // keep the 4-connected component holding the heat peak (the salient
  // region), provided it covers >= 2% of the pixels
  const size_t min_component = static_cast<size_t>(std::ceil(0.02 * h * w));
  const long peak_at =
      std::max_element(heat.begin(), heat.end()) - heat.begin();
  const int py = static_cast<int>(peak_at / w), px = static_cast<int>(peak_at % w);
  BoolMask mask(h, w);
  std::vector<std::pair<int, int>> component;
  std::deque<std::pair<int, int>> frontier{{py, px}};
  std::vector<uint8_t> seen(static_cast<size_t>(h) * w, 0);
  seen[static_cast<size_t>(py) * w + px] = 1;
  while (!frontier.empty()) {
    auto [y, x] = frontier.front();
    frontier.pop_front();
    component.emplace_back(y, x);
    const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
      const int yy = y + dy[k], xx = x + dx[k];
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      if (!above.at(yy, xx) || seen[static_cast<size_t>(yy) * w + xx]) continue;
      seen[static_cast<size_t>(yy) * w + xx] = 1;
      frontier.emplace_back(yy, xx);
    }
  }
  if (component.size() >= min_component)
    for (auto [y, x] : component) mask.at(y, x) = 1;
  return mask;
}

double ThresholdCurve::envelope(double avg_confidence) const {
  // evaluate only inside the benign fit domain: a quadratic fitted to points
  // in, say, [0.5, 0.9] says nothing trustworthy at 0.98
  const double x = std::clamp(avg_confidence, conf_lo, conf_hi);
  return coeffs[0] * x * x + coeffs[1] * x + coeffs[2];
}

bool ThresholdCurve::flags(double fooled_pct, double avg_confidence) const {
  return fooled_pct > envelope(avg_confidence) + slack;
}

void ThresholdCurve::save(const std::string& path) const {
  json j{{"family", family},
         {"coeffs", coeffs},
         {"conf_lo", conf_lo},
         {"conf_hi", conf_hi},
         {"slack", slack}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write threshold curve to " + path);
  out << j.dump() << "\n";
}

ThresholdCurve ThresholdCurve::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read threshold curve from " + path);
  json j = json::parse(in);
  ThresholdCurve c;
  c.family = j.at("family");
  c.coeffs = j.at("coeffs");
  c.conf_lo = j.at("conf_lo");
  c.conf_hi = j.at("conf_hi");
  c.slack = j.at("slack");
  return c;
}

SentinetVerdict sentinet_score(const targets::Classifier& model, const Image& suspect,
                               const std::vector<Image>& benign_test,
                               const std::string& inert_pattern, const ThresholdCurve& curve,
                               uint64_t seed) {
  SentinetVerdict v;
  auto [conf, fooled] = sentinet_raw(model, suspect, benign_test, inert_pattern, seed,
                                     v.salient_mask);
  if (v.salient_mask.empty_mask()) return v;  // benign by construction
  v.avg_confidence = conf;
  v.fooled_pct = fooled;
  v.flagged = curve.flags(fooled, conf);
  return v;
}

ThresholdCurve fit_threshold(const targets::Classifier& model,
                             const std::vector<Image>& benign_suspects,
                             const std::vector<Image>& benign_test,
                             const std::string& inert_pattern, uint64_t seed) {
  if (benign_suspects.empty()) throw ConfigError("fit_threshold needs benign suspects");
  std::vector<std::pair<double, double>> points;  // (avg_confidence, fooled_pct)
  for (size_t i = 0; i < benign_suspects.size(); ++i) {
    BoolMask mask;
    auto [conf, fooled] =
        sentinet_raw(model, benign_suspects[i], benign_test, inert_pattern, seed + i, mask);
    if (mask.empty_mask()) continue;
    points.emplace_back(conf, fooled);
  }

  ThresholdCurve curve;
  if (!points.empty()) {
    curve.conf_lo = 1.0;
    curve.conf_hi = 0.0;
    for (const auto& [c, f] : points) {
      curve.conf_lo = std::min(curve.conf_lo, c);
      curve.conf_hi = std::max(curve.conf_hi, c);
    }
  }
  if (points.size() < 3) {
    double top = 0.0;
    for (const auto& [c, f] : points) top = std::max(top, f);
    curve.coeffs = {0.0, 0.0, top};
    return curve;
  }
  Eigen::MatrixXd vand(points.size(), 3);
  Vec y(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    const double x = points[i].first;
    vand(i, 0) = x * x;
    vand(i, 1) = x;
    vand(i, 2) = 1.0;
    y[i] = points[i].second;
  }
  Vec fit = vand.colPivHouseholderQr().solve(y);
  curve.coeffs = {fit[0], fit[1], fit[2]};
  // lift the intercept so the curve is an upper envelope of every benign point
  double worst = 0.0;
  for (const auto& [c, f] : points) worst = std::max(worst, f - curve.envelope(c));
  curve.coeffs[2] += worst;
  return curve;
}

Image craft_patch(const targets::Classifier& model, const Image& sign, const BoolMask& mask,
                  const std::vector<Image>& backgrounds, int target_class, int epochs,
                  int scenes_per_epoch, double lr, uint64_t seed,
                  const augment::ParamRanges& ranges) {
  if (mask.height != sign.height() || mask.width != sign.width())
    throw DimensionMismatch("mask size differs from sign");
  if (backgrounds.empty()) throw ConfigError("no backgrounds");
  if (epochs < 1 || scenes_per_epoch < 1) throw ConfigError("need epochs and scenes >= 1");
  if (mask.empty_mask()) return sign;

  size_t plate = 0;
  for (int y = 0; y < sign.height(); ++y)
    for (int x = 0; x < sign.width(); ++x)
      if (sign.alpha_or(y, x) >= 0.5) ++plate;
  if (plate == 0) throw EmptyMask("sign has no opaque pixels");
  if (static_cast<double>(mask.count()) / plate > 0.15)
    throw ConfigError("patch mask exceeds 15% of the sign plate");

  // masked pixel coordinates and their tanh-substituted variables
  std::vector<std::array<int, 2>> coords;
  for (int y = 0; y < sign.height(); ++y)
    for (int x = 0; x < sign.width(); ++x)
      if (mask.at(y, x)) coords.push_back({y, x});
  const long dim = static_cast<long>(coords.size()) * 3;
  Vec v(dim);
  for (size_t i = 0; i < coords.size(); ++i)
    for (int c = 0; c < 3; ++c) {
      const double w0 = std::clamp(sign.at(coords[i][0], coords[i][1], c), 1e-4, 1.0 - 1e-4);
      v[static_cast<long>(i) * 3 + c] = std::atanh(2.0 * w0 - 1.0);
    }

  nn::AdamVec opt(dim, lr);
  Rng root(seed);
  Image post = augment::make_post_texture();
  const attack::Target target = attack::Target::of(model);

  Image patched = sign;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (size_t i = 0; i < coords.size(); ++i)
      for (int c = 0; c < 3; ++c)
        patched.at(coords[i][0], coords[i][1], c) =
            std::tanh(v[static_cast<long>(i) * 3 + c]) / 2.0 + 0.5;

    Vec grad = Vec::Zero(dim);
    Rng rng = root.substream(static_cast<uint64_t>(epoch));
    for (int s = 0; s < scenes_per_epoch; ++s) {
      const int bg = rng.uniform_int(0, static_cast<int>(backgrounds.size()) - 1);
      augment::TransformParams p =
          augment::sample_params(rng, backgrounds[bg].height(), backgrounds[bg].width(), ranges);
      augment::ComposeTape tape;
      augment::Scene scene =
          augment::compose_traced_with_retries(backgrounds[bg], patched, post, p, rng, tape);
      Image sign_grad;
      attack::scene_loss(target, target_class, scene, tape, &sign_grad);
      for (size_t i = 0; i < coords.size(); ++i)
        for (int c = 0; c < 3; ++c) {
          const double w = patched.at(coords[i][0], coords[i][1], c);
          const double t = 2.0 * w - 1.0;
          grad[static_cast<long>(i) * 3 + c] +=
              sign_grad.at(coords[i][0], coords[i][1], c) * (1.0 - t * t) / 2.0;
        }
    }
    grad /= scenes_per_epoch;
    opt.step(v, grad);
  }
  for (size_t i = 0; i < coords.size(); ++i)
    for (int c = 0; c < 3; ++c)
      patched.at(coords[i][0], coords[i][1], c) =
          std::tanh(v[static_cast<long>(i) * 3 + c]) / 2.0 + 0.5;
  return patched;
}

Image craft_sticker(const targets::Classifier& model, const std::vector<Image>& pool,
                    int to_class, int top, int left, int side, int epochs, double lr,
                    uint64_t seed) {
  if (pool.empty()) throw ConfigError("craft_sticker needs a pool of crops");
  if (side < 1 || epochs < 1) throw ConfigError("need side and epochs >= 1");
  for (const auto& img : pool)
    if (top < 0 || left < 0 || top + side > img.height() || left + side > img.width())
      throw DimensionMismatch("sticker placement falls outside a pool crop");

  const int kCropsPerEpoch = 8;
  Rng rng(seed);
  Vec v(static_cast<long>(side) * side * 3);
  for (long i = 0; i < v.size(); ++i) v[i] = rng.normal(0.0, 0.1);
  nn::AdamVec opt(v.size(), lr);
  for (int e = 0; e < epochs; ++e) {
    Vec grad = Vec::Zero(v.size());
    for (int k = 0; k < kCropsPerEpoch; ++k) {
      Image img = pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          for (int c = 0; c < 3; ++c)
            img.at(top + y, left + x, c) = std::tanh(v[(y * side + x) * 3 + c]) / 2.0 + 0.5;
      nn::Network::Trace trace;
      nn::Vec logits = model.logits_traced(img, trace);
      nn::Vec gy = nn::softmax(logits);
      gy[to_class] -= 1.0;  // d(-log p_target)/d logits
      Image gimg = model.input_vjp(trace, gy);
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          for (int c = 0; c < 3; ++c) {
            const double w = std::tanh(v[(y * side + x) * 3 + c]);
            grad[(y * side + x) * 3 + c] += gimg.at(top + y, left + x, c) * (1.0 - w * w) / 2.0;
          }
    }
    opt.step(v, grad / kCropsPerEpoch);
  }
  Image sticker(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < 3; ++c)
        sticker.at(y, x, c) = std::tanh(v[(y * side + x) * 3 + c]) / 2.0 + 0.5;
  return sticker;
}

Image apply_sticker(const Image& img, const Image& sticker, int top, int left) {
  if (top < 0 || left < 0 || top + sticker.height() > img.height() ||
      left + sticker.width() > img.width())
    throw DimensionMismatch("sticker placement falls outside the image");
  Image out = img;
  for (int y = 0; y < sticker.height(); ++y)
    for (int x = 0; x < sticker.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(top + y, left + x, c) = sticker.at(y, x, c);
  return out;
}

}  // namespace slap::defences
