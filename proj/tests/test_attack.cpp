#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "slap/attack.hpp"
#include "slap/imaging.hpp"
#include "slap/rng.hpp"
#include "testutil.hpp"

using namespace slap;
using namespace slap::attack;

namespace {

std::vector<Image> test_backgrounds(int n, uint64_t seed0) {
  std::vector<Image> bgs;
  for (int i = 0; i < n; ++i) bgs.push_back(augment::make_background(104, 104, seed0 + i));
  return bgs;
}

AttackConfig tiny_config() {
  AttackConfig cfg;
  cfg.grid_n = 5;
  cfg.epochs = 2;
  cfg.images_per_epoch = 40;
  cfg.batch_size = 10;
  cfg.seed = 17;
  return cfg;
}

}  // namespace

TEST_CASE("variable substitution") {
  SUBCASE("round trip is exact to 1e-9") {
    Rng rng(1);
    Image w(6, 6);
    for (auto& v : w.data()) v = rng.uniform(0.01, 0.99);
    Image back = substitute(substitute_inverse(w));
    for (size_t i = 0; i < w.data().size(); ++i)
      CHECK(std::abs(back.data()[i] - w.data()[i]) <= 1e-9);
  }

  SUBCASE("range is (0,1) for any input") {
    Image v(3, 3);
    v.at(0, 0, 0) = -1e6;
    v.at(0, 0, 1) = 1e6;
    Image w = substitute(v);
    for (double x : w.data()) {
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
    }
    CHECK(w.at(0, 0, 2) == doctest::Approx(0.5));
  }

  SUBCASE("inverse rejects the boundary") {
    Image w(1, 1, 0.5);
    w.at(0, 0, 0) = 0.0;
    CHECK_THROWS_AS(substitute_inverse(w), ConfigError);
    w.at(0, 0, 0) = 1.0;
    CHECK_THROWS_AS(substitute_inverse(w), ConfigError);
  }

  SUBCASE("derivative of the substitution matches finite differences") {
    Rng rng(2);
    for (int i = 0; i < 20; ++i) {
      const double v = rng.uniform(-2.0, 2.0);
      Image a(1, 1, v - 1e-6), b(1, 1, v + 1e-6);
      const double fd = (substitute(b).at(0, 0, 0) - substitute(a).at(0, 0, 0)) / 2e-6;
      const double w = std::tanh(v) / 2.0 + 0.5;
      const double t = 2.0 * w - 1.0;
      CHECK(fd == doctest::Approx((1.0 - t * t) / 2.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("detection loss definitions") {
  SUBCASE("detector loss sums raw scores") {
    Eigen::VectorXd s(3);
    s << 0.7, 0.2, 0.0;
    CHECK(loss_detector(s) == doctest::Approx(0.9));
    CHECK(loss_detector(Eigen::VectorXd::Zero(5)) == 0.0);
    Eigen::VectorXd one = Eigen::VectorXd::Zero(4);
    one[2] = 1.0;
    CHECK(loss_detector(one) == doctest::Approx(1.0));
  }

  SUBCASE("classifier loss picks the target probability") {
    Eigen::VectorXd p(3);
    p << 0.2, 0.7, 0.1;
    CHECK(loss_classifier(p, 1) == doctest::Approx(0.7));
    CHECK_THROWS_AS(loss_classifier(p, 3), ConfigError);
    CHECK_THROWS_AS(loss_classifier(p, -1), ConfigError);
  }
}

TEST_CASE("config validation") {
  AttackConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  AttackConfig bad = cfg;
  bad.grid_n = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.worst_fraction = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 700;  // larger than images_per_epoch
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.p_norm = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.lambda = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("scene_loss gradient matches finite differences") {
  auto model = testutil::affine_projection();
  Image surface = augment::render_sign(0, 32);
  Image bg = augment::make_background(104, 104, 5);
  Image post = augment::make_post_texture();
  Rng rng(6);
  augment::TransformParams p = augment::sample_params(rng, 104, 104);
  p.sign_size = 45;
  p.place_x = 52;
  p.place_y = 50;

  Image w(3, 3);
  for (auto& v : w.data()) v = rng.uniform(0.2, 0.8);
  Image sign = augment::adversarial_sign(model, surface, w);
  // dither the flat grid cells: max-pool ties have no derivative and would
  // make finite differences disagree for legitimate reasons
  for (auto& v : sign.data()) v = std::clamp(v + rng.uniform(-0.02, 0.02), 0.0, 1.0);

  auto check_target = [&](const Target& target) {
    augment::ComposeTape tape;
    augment::Scene scene = augment::compose_traced(bg, sign, post, p, tape);
    Image analytic;
    scene_loss(target, augment::kStopClass, scene, tape, &analytic);

    auto scalar = [&](const Image& s) {
      augment::ComposeTape t2;
      augment::Scene sc = augment::compose_traced(bg, s, post, p, t2);
      return scene_loss(target, augment::kStopClass, sc, t2, nullptr);
    };

    Rng pick(7);
    int checked = 0;
    while (checked < 20) {
      const int y = pick.uniform_int(0, 31), x = pick.uniform_int(0, 31);
      const int c = pick.uniform_int(0, 2);
      if (sign.alpha(y, x) == 0.0) continue;
      Image lo = sign, hi = sign;
      lo.at(y, x, c) -= 1e-4;
      hi.at(y, x, c) += 1e-4;
      const double fd = (scalar(hi) - scalar(lo)) / 2e-4;
      const double an = analytic.at(y, x, c);
      CHECK(std::abs(fd - an) <= 5e-3 * std::max({std::abs(fd), std::abs(an), 1e-3}));
      ++checked;
    }
  };

  SUBCASE("classifier target") {
    targets::Classifier cls = testutil::shared_classifier("deep");
    check_target(Target::of(cls));
  }

  SUBCASE("detector target") {
    targets::Detector det = testutil::shared_detector();
    check_target(Target::of(det));
  }
}

TEST_CASE("full objective gradient matches finite differences") {
  // one fixed scene: mean detection loss + lambda * penalty + tv, all
  // differentiated with respect to the grid variable w
  auto model = testutil::affine_projection();
  targets::Classifier cls = testutil::shared_classifier("deep");
  Target target = Target::of(cls);
  Image surface = augment::render_sign(0, 32);
  Image bg = augment::make_background(104, 104, 8);
  Image post = augment::make_post_texture();
  Rng rng(9);
  augment::TransformParams p = augment::sample_params(rng, 104, 104);
  p.sign_size = 40;
  p.place_x = 50;
  p.place_y = 52;

  const double lambda = 0.05, tv_weight = 1.0;
  Image w(3, 3);
  for (auto& v : w.data()) v = rng.uniform(0.25, 0.75);

  auto objective = [&](const Image& wg) {
    Image sign = augment::adversarial_sign(model, surface, wg);
    augment::ComposeTape tape;
    augment::Scene scene = augment::compose_traced(bg, sign, post, p, tape);
    const double det = scene_loss(target, augment::kStopClass, scene, tape, nullptr);
    double pen = 0.0;
    long n = 0;
    for (int y = 0; y < sign.height(); ++y)
      for (int x = 0; x < sign.width(); ++x) {
        if (sign.alpha(y, x) < 0.5) continue;
        for (int c = 0; c < 3; ++c) {
          const double d = sign.at(y, x, c) - surface.at(y, x, c);
          pen += d * d;
          ++n;
        }
      }
    pen = std::sqrt(pen / n);
    return det + lambda * pen + tv_weight * imaging::total_variation(wg);
  };

  // analytic gradient assembled from the same pieces craft uses
  Image proj = imaging::grid_upsample(w, 32, 32);
  projmodel::ProjectionModel::Tape ptape;
  Image sign = model.predict_image_traced(surface, proj, ptape);
  sign.alpha_plane() = surface.alpha_plane();
  augment::ComposeTape tape;
  augment::Scene scene = augment::compose_traced(bg, sign, post, p, tape);
  Image sign_grad;
  scene_loss(target, augment::kStopClass, scene, tape, &sign_grad);
  double pen = 0.0;
  long n = 0;
  for (int y = 0; y < sign.height(); ++y)
    for (int x = 0; x < sign.width(); ++x) {
      if (sign.alpha(y, x) < 0.5) continue;
      for (int c = 0; c < 3; ++c) {
        const double d = sign.at(y, x, c) - surface.at(y, x, c);
        pen += d * d;
        ++n;
      }
    }
  pen = std::sqrt(pen / n);
  for (int y = 0; y < sign.height(); ++y)
    for (int x = 0; x < sign.width(); ++x) {
      if (sign.alpha(y, x) < 0.5) continue;
      for (int c = 0; c < 3; ++c)
        sign_grad.at(y, x, c) += lambda * (sign.at(y, x, c) - surface.at(y, x, c)) / (n * pen);
    }
  Image g_proj = model.predict_image_vjp(ptape, sign_grad);
  Image g_w = imaging::grid_upsample_vjp(g_proj, 3);
  Image tv_g = imaging::total_variation_vjp(w);
  for (size_t i = 0; i < g_w.data().size(); ++i) g_w.data()[i] += tv_weight * tv_g.data()[i];

  Rng pick(10);
  for (int i = 0; i < 15; ++i) {
    const int y = pick.uniform_int(0, 2), x = pick.uniform_int(0, 2);
    const int c = pick.uniform_int(0, 2);
    Image lo = w, hi = w;
    lo.at(y, x, c) -= 1e-4;
    hi.at(y, x, c) += 1e-4;
    const double fd = (objective(hi) - objective(lo)) / 2e-4;
    const double an = g_w.at(y, x, c);
    CHECK(std::abs(fd - an) <= 5e-3 * std::max({std::abs(fd), std::abs(an), 1e-2}));
  }
}

TEST_CASE("craft on a miniature problem") {
  auto model = testutil::affine_projection();
  targets::Classifier cls = testutil::shared_classifier("deep");
  Target target = Target::of(cls);
  Image surface = augment::render_sign(0, 64);
  auto bgs = test_backgrounds(4, 300);

  AttackConfig cfg = tiny_config();
  AttackResult r = craft(cfg, target, model, surface, bgs);

  SUBCASE("result shape and bounds") {
    CHECK(r.w.height() == cfg.grid_n);
    CHECK(r.w.width() == cfg.grid_n);
    CHECK(static_cast<int>(r.loss_trace.size()) == cfg.epochs);
    for (double x : r.w.data()) {
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
    }
    CHECK(r.final_loss == doctest::Approx(*std::min_element(r.loss_trace.begin(),
                                                            r.loss_trace.end())));
    CHECK(r.config.lr == doctest::Approx(0.05));  // auto-resolved for classifiers
  }

  SUBCASE("same seed reproduces the result") {
    AttackResult r2 = craft(cfg, target, model, surface, bgs);
    CHECK(r2.w.data() == r.w.data());
    CHECK(r2.loss_trace == r.loss_trace);
  }

  SUBCASE("parallel execution matches serial") {
    AttackConfig par = cfg;
    par.jobs = 4;
    AttackResult r2 = craft(par, target, model, surface, bgs);
    CHECK(r2.w.data() == r.w.data());
    CHECK(r2.loss_trace == r.loss_trace);
  }

  SUBCASE("optimization reduces the detection loss") {
    CHECK(r.loss_trace.back() < r.loss_trace.front());
  }

  SUBCASE("a heavy smoothness penalty flattens the grid") {
    AttackConfig smooth = cfg;
    smooth.tv_weight = 50.0;
    AttackResult rs = craft(smooth, target, model, surface, bgs);
    CHECK(imaging::total_variation(rs.w) < imaging::total_variation(r.w));
  }

  SUBCASE("save and load round trip") {
    r.save("test_attack_tmp");
    AttackResult back = AttackResult::load("test_attack_tmp");
    CHECK(back.w.data() == r.w.data());
    CHECK(back.loss_trace == r.loss_trace);
    CHECK(back.final_loss == r.final_loss);
    CHECK(back.config.grid_n == cfg.grid_n);
    CHECK(back.config.seed == cfg.seed);
    Image png = read_png("test_attack_tmp.png");
    CHECK(png.height() == cfg.grid_n * 8);
    std::remove("test_attack_tmp.json");
    std::remove("test_attack_tmp.png");
  }
}

TEST_CASE("craft input validation") {
  auto model = testutil::identity_projection();
  targets::Classifier cls = testutil::shared_classifier("deep");
  Target target = Target::of(cls);
  Image surface = augment::render_sign(0, 64);
  auto bgs = test_backgrounds(2, 400);
  AttackConfig cfg = tiny_config();

  CHECK_THROWS_AS(craft(cfg, target, model, surface, {}), ConfigError);
  Image no_alpha(64, 64, 0.5);
  CHECK_THROWS_AS(craft(cfg, target, model, no_alpha, bgs), ConfigError);
}

TEST_CASE("evaluate_success accounting and benign baseline") {
  auto model = testutil::identity_projection();
  Image surface = augment::render_sign(0, 64);
  auto bgs = test_backgrounds(4, 500);
  Image black(3, 3);  // all-zero projection: the sign looks benign

  SUBCASE("black projection rarely fools the classifier") {
    targets::Classifier cls = testutil::shared_classifier("deep");
    Rng rng(20);
    SuccessReport rep = evaluate_success(black, model, surface, Target::of(cls), bgs, 200, rng, 4);
    CHECK(rep.n_scenes == 200);
    int total = 0, succ = 0;
    for (const auto& row : rep.total)
      for (int v : row) total += v;
    for (const auto& row : rep.succeeded)
      for (int v : row) succ += v;
    CHECK(total == 200);
    CHECK(rep.success_rate == doctest::Approx(static_cast<double>(succ) / 200));
    for (int a = 0; a < SuccessReport::kAngleBins; ++a)
      for (int s = 0; s < SuccessReport::kSizeBins; ++s)
        CHECK(rep.succeeded[a][s] <= rep.total[a][s]);
    CHECK(rep.success_rate <= 0.05);
  }

  SUBCASE("black projection rarely hides the sign from the detector") {
    targets::Detector det = testutil::shared_detector();
    Rng rng(21);
    SuccessReport rep = evaluate_success(black, model, surface, Target::of(det), bgs, 200, rng, 4);
    CHECK(rep.success_rate <= 0.08);
  }

  SUBCASE("deterministic for a fixed rng seed") {
    targets::Classifier cls = testutil::shared_classifier("deep");
    Rng a(22), b(22);
    SuccessReport ra = evaluate_success(black, model, surface, Target::of(cls), bgs, 50, a);
    SuccessReport rb = evaluate_success(black, model, surface, Target::of(cls), bgs, 50, b, 3);
    CHECK(ra.success_rate == rb.success_rate);
    CHECK(ra.total == rb.total);
    CHECK(ra.succeeded == rb.succeeded);
  }

  SUBCASE("rejects empty inputs") {
    targets::Classifier cls = testutil::shared_classifier("deep");
    Rng rng(23);
    CHECK_THROWS_AS(evaluate_success(black, model, surface, Target::of(cls), {}, 10, rng),
                    ConfigError);
    CHECK_THROWS_AS(evaluate_success(black, model, surface, Target::of(cls), bgs, 0, rng),
                    ConfigError);
  }
}
