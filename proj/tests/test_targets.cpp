#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "slap/augment.hpp"
#include "slap/rng.hpp"
#include "slap/targets.hpp"
#include "testutil.hpp"

using namespace slap;
using namespace slap::targets;

TEST_CASE("classifier architectures differ in size by at least 2x") {
  Classifier deep("deep", 8, 0);
  Classifier shallow("shallow", 8, 0);
  CHECK(deep.parameter_count() >= 2 * shallow.parameter_count());
  CHECK_THROWS_AS(Classifier("resnet152", 8, 0), ConfigError);
}

TEST_CASE("trained classifier") {
  Classifier model = testutil::shared_classifier("deep");
  auto held = augment::classifier_dataset(25, 2);

  SUBCASE("held-out accuracy at least 95%") { CHECK(accuracy(model, held) >= 0.95); }

  SUBCASE("probabilities form a distribution") {
    for (int i = 0; i < 20; ++i) {
      Vec p = model.probabilities(held[i].image);
      double sum = 0.0;
      for (long j = 0; j < p.size(); ++j) {
        CHECK(p[j] >= 0.0);
        CHECK(p[j] <= 1.0);
        sum += p[j];
      }
      CHECK(std::abs(sum - 1.0) < 1e-5);
    }
  }

  SUBCASE("benign stop crops score above the detection threshold") {
    int total = 0, above = 0;
    for (const auto& d : held) {
      if (d.label != augment::kStopClass) continue;
      ++total;
      if (model.probabilities(d.image)[augment::kStopClass] > model.detection_threshold) ++above;
    }
    REQUIRE(total >= 20);
    CHECK(static_cast<double>(above) / total >= 0.99);
  }

  SUBCASE("uniform noise is not confidently classified") {
    double mean_max = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
      Rng rng(seed);
      Image noise(32, 32);
      for (auto& v : noise.data()) v = rng.uniform();
      Vec p = model.probabilities(noise);
      mean_max += p.maxCoeff();
    }
    CHECK(mean_max / 100.0 < 0.9);
  }
}

TEST_CASE("training determinism and degenerate input") {
  auto data = augment::classifier_dataset(10, 3);

  SUBCASE("same seed, same weights") {
    Classifier a = train_classifier(data, "shallow", 3, 1e-3, 42);
    Classifier b = train_classifier(data, "shallow", 3, 1e-3, 42);
    CHECK(a.network().serialize() == b.network().serialize());
  }

  SUBCASE("one class is rejected") {
    std::vector<augment::LabeledImage> mono;
    for (const auto& d : data)
      if (d.label == 0) mono.push_back(d);
    CHECK_THROWS_AS(train_classifier(mono, "shallow", 1, 1e-3, 0), DegenerateDataset);
  }
}

TEST_CASE("adversarial training keeps benign accuracy") {
  Classifier adv = testutil::shared_classifier("deep", true);
  auto held = augment::classifier_dataset(25, 2);
  CHECK(accuracy(adv, held) >= 0.95);
}

TEST_CASE("classifier input gradient matches finite differences") {
  Classifier model("deep", 8, 7);
  // random input: flat color patches create max-pool ties where the true
  // derivative does not exist and finite differences disagree by design
  Rng noise(44);
  Image img(32, 32);
  for (auto& v : img.data()) v = noise.uniform(0.1, 0.9);

  // scalar: probability of the stop class
  auto scalar = [&](const Image& x) { return model.probabilities(x)[0]; };

  nn::Network::Trace trace;
  Vec logits = model.logits_traced(img, trace);
  Vec p = nn::softmax(logits);
  Vec gy(p.size());
  for (long j = 0; j < p.size(); ++j) gy[j] = p[0] * ((j == 0 ? 1.0 : 0.0) - p[j]);
  Image analytic = model.input_vjp(trace, gy);

  Rng pick(11);
  for (int i = 0; i < 50; ++i) {
    const int y = pick.uniform_int(0, 31), x = pick.uniform_int(0, 31);
    const int c = pick.uniform_int(0, 2);
    Image lo = img, hi = img;
    lo.at(y, x, c) -= 1e-5;
    hi.at(y, x, c) += 1e-5;
    const double fd = (scalar(hi) - scalar(lo)) / 2e-5;
    const double an = analytic.at(y, x, c);
    CHECK(std::abs(fd - an) <= 1e-3 * std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
}

TEST_CASE("trained detector regression scenes") {
  Detector model = testutil::shared_detector();
  Image sign = augment::render_sign(0, 64);
  Image post = augment::make_post_texture();

  SUBCASE("one centered sign gives exactly one stop detection") {
    Image bg = augment::make_background(104, 104, 42);
    augment::TransformParams p;
    p.sign_size = 60;
    p.place_x = 52;
    p.place_y = 48;
    auto scene = augment::compose(bg, sign, post, p, 0, 0);
    auto dets = detect(model, scene.image);
    // NMS is per class, so the confusable faded-stop class may emit a
    // cross-class box on the same sign; the stop class itself must give
    // exactly one box.
    std::vector<Detection> stops;
    for (const auto& d : dets)
      if (d.class_id == augment::kStopClass) stops.push_back(d);
    REQUIRE(stops.size() == 1);
    CHECK(stops[0].score > model.detection_threshold);
    for (double v : stops[0].box) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }

  SUBCASE("empty background gives zero detections") {
    CHECK(detect(model, augment::make_background(104, 104, 43)).empty());
  }
}

TEST_CASE("raw_scores shape contract") {
  Detector model(8, 1);
  Rng rng(2);
  Image noise(104, 104);
  for (auto& v : noise.data()) v = rng.uniform();
  CHECK(raw_scores(model, noise, 0).size() == 13 * 13);
  Image bg = augment::make_background(104, 104, 3);
  CHECK(raw_scores(model, bg, 5).size() == 13 * 13);
  CHECK_THROWS_AS(raw_scores(model, bg, 99), ConfigError);
}

TEST_CASE("nms output is a subset of threshold passers with low overlap") {
  Detector model(8, 9);
  model.detection_threshold = 0.005;  // untrained net: force many candidates
  Rng rng(4);
  Image noise(104, 104);
  for (auto& v : noise.data()) v = rng.uniform();
  auto dets = detect(model, noise);
  REQUIRE(dets.size() >= 2);
  for (const auto& d : dets) CHECK(d.score > model.detection_threshold);
  for (size_t i = 0; i < dets.size(); ++i)
    for (size_t j = i + 1; j < dets.size(); ++j)
      if (dets[i].class_id == dets[j].class_id)
        CHECK(iou(dets[i].box, dets[j].box) < model.nms_iou);
}

TEST_CASE("detector score gradient matches finite differences") {
  Detector model(8, 5);
  Image bg = augment::make_background(104, 104, 6);
  Rng rng(7);
  Vec weights(13 * 13);
  for (long i = 0; i < weights.size(); ++i) weights[i] = rng.uniform(-1, 1);

  auto scalar = [&](const Image& x) { return raw_scores(model, x, 0).dot(weights); };

  DetectorTape tape;
  raw_scores_traced(model, bg, 0, tape);
  Image analytic = raw_scores_vjp(model, tape, weights);

  Rng pick(8);
  for (int i = 0; i < 30; ++i) {
    const int y = pick.uniform_int(0, 103), x = pick.uniform_int(0, 103);
    const int c = pick.uniform_int(0, 2);
    Image lo = bg, hi = bg;
    lo.at(y, x, c) -= 1e-5;
    hi.at(y, x, c) += 1e-5;
    const double fd = (scalar(hi) - scalar(lo)) / 2e-5;
    const double an = analytic.at(y, x, c);
    CHECK(std::abs(fd - an) <= 1e-3 * std::max({std::abs(fd), std::abs(an), 1e-6}));
  }
}

TEST_CASE("checkpoint round trips") {
  SUBCASE("classifier") {
    Classifier a("shallow", 8, 3);
    a.detection_threshold = 0.6;
    a.save("test_cls_tmp.json");
    Classifier b = Classifier::load("test_cls_tmp.json");
    CHECK(b.arch() == "shallow");
    CHECK(b.detection_threshold == 0.6);
    Image img(32, 32, 0.5);
    CHECK(a.logits(img) == b.logits(img));
    std::remove("test_cls_tmp.json");
  }

  SUBCASE("detector") {
    Detector a(8, 4);
    a.save("test_det_tmp.json");
    Detector b = Detector::load("test_det_tmp.json");
    CHECK(b.grid() == 13);
    Image img(104, 104, 0.5);
    CHECK(raw_scores(a, img, 0) == raw_scores(b, img, 0));
    std::remove("test_det_tmp.json");
  }
}
