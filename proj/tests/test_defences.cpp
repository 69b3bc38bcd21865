#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "slap/defences.hpp"
#include "slap/rng.hpp"
#include "testutil.hpp"

using namespace slap;
using namespace slap::defences;

namespace {

std::string image_key(const Image& img) {
  std::string key;
  key.reserve(img.data().size());
  for (double v : img.data()) key.push_back(static_cast<char>(std::lround(v * 255.0)));
  return key;
}

/// A 10x10 patch optimized in place to flip one crop's predicted class.
Image make_patched_crop(const targets::Classifier& model, Image img, int y0, int x0,
                        int from_class, int to_class) {
  for (int iter = 0; iter < 600; ++iter) {
    nn::Network::Trace trace;
    nn::Vec logits = model.logits_traced(img, trace);
    nn::Vec p = nn::softmax(logits);
    if (p[to_class] > 0.95) break;
    nn::Vec gy = nn::Vec::Zero(logits.size());
    gy[to_class] = 1.0;
    gy[from_class] = -1.0;
    Image grad = model.input_vjp(trace, gy);
    for (int y = y0; y < y0 + 10; ++y)
      for (int x = x0; x < x0 + 10; ++x)
        for (int c = 0; c < 3; ++c)
          img.at(y, x, c) =
              std::clamp(img.at(y, x, c) + 0.03 * (grad.at(y, x, c) > 0 ? 1.0 : -1.0), 0.0, 1.0);
  }
  return img;
}

BoolMask body_patch_mask(const Image& sign, double target_coverage) {
  size_t plate = 0;
  for (int y = 0; y < sign.height(); ++y)
    for (int x = 0; x < sign.width(); ++x)
      if (sign.alpha_or(y, x) >= 0.5) ++plate;
  const int side = static_cast<int>(std::sqrt(target_coverage * plate));
  BoolMask mask(sign.height(), sign.width());
  const int y0 = sign.height() * 55 / 100, x0 = (sign.width() - side) / 2;
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) mask.at(y, x) = 1;
  return mask;
}

}  // namespace

TEST_CASE("input randomization") {
  auto data = augment::classifier_dataset(4, 31);
  const Image& img = data[0].image;

  SUBCASE("max_size 32 is the identity") {
    Rng rng(1);
    Image out = input_randomization(img, 32, rng);
    CHECK(out.data() == img.data());
  }

  SUBCASE("draws are diverse at max_size 36") {
    Rng rng(2);
    std::set<std::string> distinct;
    for (int i = 0; i < 1000; ++i) distinct.insert(image_key(input_randomization(img, 36, rng)));
    CHECK(distinct.size() >= 20);
  }

  SUBCASE("output is always 32x32") {
    Rng rng(3);
    for (int i = 0; i < 20; ++i) {
      Image out = input_randomization(img, 36, rng);
      CHECK(out.height() == 32);
      CHECK(out.width() == 32);
    }
  }

  SUBCASE("benign accuracy drop at most 5 points") {
    targets::Classifier model = testutil::shared_classifier("deep");
    auto held = augment::classifier_dataset(15, 32);
    Rng rng(4);
    int plain = 0, randomized = 0;
    for (const auto& d : held) {
      nn::Vec p = model.probabilities(d.image);
      int best;
      p.maxCoeff(&best);
      if (best == d.label) ++plain;
      nn::Vec pr = model.probabilities(input_randomization(d.image, 36, rng));
      pr.maxCoeff(&best);
      if (best == d.label) ++randomized;
    }
    CHECK(plain - randomized <= static_cast<int>(0.05 * held.size()));
  }

  SUBCASE("input contract") {
    Rng rng(5);
    CHECK_THROWS_AS(input_randomization(Image(16, 16), 36, rng), DimensionMismatch);
    CHECK_THROWS_AS(input_randomization(img, 31, rng), ConfigError);
  }
}

TEST_CASE("occlusion saliency") {
  targets::Classifier model = testutil::shared_classifier("deep");

  SUBCASE("mask shape matches the input") {
    auto data = augment::classifier_dataset(2, 33);
    BoolMask m = saliency_mask(model, data[0].image, data[0].label);
    CHECK(m.height == 32);
    CHECK(m.width == 32);
    for (uint8_t v : m.data) CHECK(v <= 1);
  }

  SUBCASE("constant image yields an empty mask") {
    Image flat(32, 32, 0.5);
    CHECK(saliency_mask(model, flat, 0).empty_mask());
  }

  SUBCASE("a class-flipping patch is localized") {
    auto data = augment::classifier_dataset(6, 34);
    int found = 0, localized = 0;
    for (const auto& d : data) {
      if (d.label != augment::kStopClass) continue;
      const int y0 = 11, x0 = 11;
      // flip to a visually distinct class: a flip to the faded-stop lookalike
      // draws on the whole body color, so its evidence is diffuse by design
      Image patched = make_patched_crop(model, d.image, y0, x0, augment::kStopClass, 4);
      nn::Vec p = model.probabilities(patched);
      int best;
      p.maxCoeff(&best);
      if (best == augment::kStopClass) continue;  // patch failed to flip; skip
      ++found;
      BoolMask m = saliency_mask(model, patched, best);
      int hit = 0;
      for (int y = y0; y < y0 + 10; ++y)
        for (int x = x0; x < x0 + 10; ++x) hit += m.at(y, x);
      if (hit >= 50) ++localized;
    }
    REQUIRE(found >= 3);
    CHECK(localized >= (found + 1) / 2);
  }
}

TEST_CASE("threshold curve") {
  ThresholdCurve c;
  c.coeffs = {1.0, -1.0, 0.5};
  c.slack = 0.05;
  CHECK(c.envelope(0.0) == doctest::Approx(0.5));
  CHECK(c.envelope(1.0) == doctest::Approx(0.5));
  CHECK(c.flags(0.9, 0.5));        // 0.9 > 0.25 + 0.05
  CHECK_FALSE(c.flags(0.25, 0.5));
  CHECK_FALSE(c.flags(0.30, 0.5));  // inside the slack band

  c.save("test_curve_tmp.json");
  ThresholdCurve back = ThresholdCurve::load("test_curve_tmp.json");
  CHECK(back.coeffs == c.coeffs);
  CHECK(back.slack == c.slack);
  CHECK(back.family == c.family);
  std::remove("test_curve_tmp.json");
}

TEST_CASE("sentinet scoring") {
  targets::Classifier model = testutil::shared_classifier("deep");
  auto pool = augment::classifier_dataset(12, 35);
  std::vector<Image> benign_test, benign_suspects;
  for (size_t i = 0; i < pool.size(); ++i)
    ((i % 2) ? benign_test : benign_suspects).push_back(pool[i].image);
  benign_suspects.resize(25);
  benign_test.resize(30);
  ThresholdCurve curve = fit_threshold(model, benign_suspects, benign_test, "random", 7);

  SUBCASE("benign suspects are not flagged against their own threshold") {
    int flagged = 0;
    for (size_t i = 0; i < benign_suspects.size(); ++i)
      if (sentinet_score(model, benign_suspects[i], benign_test, "random", curve, 7 + i).flagged)
        ++flagged;
    CHECK(static_cast<double>(flagged) / benign_suspects.size() <= 0.05);
  }

  SUBCASE("scores live in the unit interval and are deterministic") {
    SentinetVerdict a = sentinet_score(model, benign_suspects[0], benign_test, "random", curve, 9);
    SentinetVerdict b = sentinet_score(model, benign_suspects[0], benign_test, "random", curve, 9);
    CHECK(a.avg_confidence >= 0.0);
    CHECK(a.avg_confidence <= 1.0);
    CHECK(a.fooled_pct >= 0.0);
    CHECK(a.fooled_pct <= 1.0);
    CHECK(a.avg_confidence == b.avg_confidence);
    CHECK(a.fooled_pct == b.fooled_pct);
  }

  SUBCASE("checkerboard inert pattern works and bad names are rejected") {
    CHECK_NOTHROW(sentinet_score(model, benign_suspects[0], benign_test, "checkerboard", curve));
    CHECK_THROWS_AS(sentinet_score(model, benign_suspects[0], benign_test, "plaid", curve),
                    ConfigError);
  }

  SUBCASE("empty salient mask gives a benign verdict") {
    SentinetVerdict v = sentinet_score(model, Image(32, 32, 0.5), benign_test, "random", curve);
    CHECK_FALSE(v.flagged);
    CHECK(v.avg_confidence == 0.0);
    CHECK(v.fooled_pct == 0.0);
  }

  SUBCASE("sticker positive control is flagged") {
    // a universal sticker concentrates all class evidence in one 10x10 block,
    // which is the geometry the overlay test is designed to catch
    std::vector<Image> pool;
    for (const auto& d : augment::classifier_dataset(10, 36)) pool.push_back(d.image);
    const int top = 11, left = 11, side = 10;
    Image sticker = craft_sticker(model, pool, 2, top, left, side, 300, 0.05, 5);

    int flagged = 0, n = 0;
    for (const auto& d : augment::classifier_dataset(4, 37)) {
      if (n >= 15) break;
      Image img = apply_sticker(d.image, sticker, top, left);
      if (sentinet_score(model, img, benign_test, "random", curve, 100 + n).flagged) ++flagged;
      ++n;
    }
    CHECK(flagged >= 12);  // >= 80%
  }
}

TEST_CASE("craft_patch contracts") {
  targets::Classifier model = testutil::shared_classifier("deep");
  Image sign = augment::render_sign(augment::kStopClass, 64);
  std::vector<Image> bgs;
  for (int i = 0; i < 3; ++i) bgs.push_back(augment::make_background(104, 104, 800 + i));

  SUBCASE("zero-area mask returns the sign unchanged") {
    BoolMask empty(64, 64);
    Image out = craft_patch(model, sign, empty, bgs, 0, 3, 5, 0.1, 1);
    CHECK(out.data() == sign.data());
  }

  SUBCASE("oversized mask is rejected") {
    BoolMask big(64, 64);
    for (auto& v : big.data) v = 1;
    CHECK_THROWS_AS(craft_patch(model, sign, big, bgs, 0, 3, 5, 0.1, 1), ConfigError);
  }

  SUBCASE("same seed gives an identical patch") {
    BoolMask mask = body_patch_mask(sign, 0.05);
    Image a = craft_patch(model, sign, mask, bgs, 0, 4, 10, 0.1, 2);
    Image b = craft_patch(model, sign, mask, bgs, 0, 4, 10, 0.1, 2);
    CHECK(a.data() == b.data());
  }

  SUBCASE("pixels outside the mask never change") {
    BoolMask mask = body_patch_mask(sign, 0.05);
    Image out = craft_patch(model, sign, mask, bgs, 0, 4, 10, 0.1, 3);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        if (mask.at(y, x)) continue;
        for (int c = 0; c < 3; ++c) CHECK(out.at(y, x, c) == sign.at(y, x, c));
      }
  }

  SUBCASE("a 12% patch defeats the classifier in most scenes") {
    BoolMask mask = body_patch_mask(sign, 0.12);
    Image patched = craft_patch(model, sign, mask, bgs, 0, 40, 30, 0.1, 11);
    Image post = augment::make_post_texture();
    Rng rng(13);
    int wins = 0;
    const int n = 100;
    for (int i = 0; i < n; ++i) {
      const int bg = rng.uniform_int(0, 2);
      auto p = augment::sample_params(rng, 104, 104, patch_scene_ranges());
      auto sc = augment::compose_with_retries(bgs[bg], patched, post, p, rng);
      if (model.probabilities(augment::crop_sign(sc))[0] <= model.detection_threshold) ++wins;
    }
    CHECK(wins >= 70);
  }
}

TEST_CASE("boolmask png round trip") {
  BoolMask m(8, 8);
  m.at(2, 3) = 1;
  m.at(7, 0) = 1;
  CHECK(m.count() == 2);
  CHECK(m.coverage() == doctest::Approx(2.0 / 64.0));
  m.save_png("test_mask_tmp.png");
  BoolMask back = BoolMask::load_png("test_mask_tmp.png");
  CHECK(back.data == m.data);
  std::remove("test_mask_tmp.png");
}
