#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "slap/projmodel.hpp"
#include "slap/projsim.hpp"
#include "slap/rng.hpp"

using namespace slap;
using namespace slap::projsim;

namespace {

Image random_surface(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& v : img.data()) v = rng.uniform(0.05, 0.95);
  return img;
}

Image const_projection(int h, int w, std::array<double, 3> c) {
  Image img(h, w);
  for (size_t i = 0; i < img.data().size(); ++i) img.data()[i] = c[i % 3];
  return img;
}

}  // namespace

TEST_CASE("render_steady basics") {
  RigConfig rig = rig_preset("lux120");
  Image surface = random_surface(6, 6, 1);

  SUBCASE("black projection ignores projector strength") {
    Image black = const_projection(6, 6, {0, 0, 0});
    Image o1 = render_steady(surface, black, rig);
    Image o2 = render_steady(surface, const_projection(6, 6, {0, 0, 0}), rig);
    for (size_t i = 0; i < o1.data().size(); ++i) CHECK(o1.data()[i] == o2.data()[i]);
    // With the preset's auto-exposure gain, the unlit capture reproduces
    // the surface colors.
    for (size_t i = 0; i < o1.data().size(); ++i)
      CHECK(o1.data()[i] == doctest::Approx(surface.data()[i]).epsilon(1e-9));
  }

  SUBCASE("zero projector power makes output projection-independent") {
    RigConfig dark = rig;
    dark.projector_peak_lux = 0.0;
    dark.exposure_gain = 1.0;
    Image a = render_steady(surface, const_projection(6, 6, {1, 0.2, 0.7}), dark);
    Image b = render_steady(surface, const_projection(6, 6, {0.1, 0.9, 0.3}), dark);
    for (size_t i = 0; i < a.data().size(); ++i) CHECK(a.data()[i] == b.data()[i]);
  }

  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(render_steady(surface, Image(3, 3), rig), DimensionMismatch);
  }
}

TEST_CASE("ambient light shrinks the projector's reach") {
  Image surface = random_surface(10, 10, 2);
  Rng rng(3);
  auto shift = [&](const RigConfig& rig, const std::array<double, 3>& color) {
    Image lit = render_steady_color(surface, color, rig);
    Image dark = render_steady_color(surface, {0, 0, 0}, rig);
    double total = 0.0;
    for (size_t i = 0; i < lit.data().size(); ++i) total += std::abs(lit.data()[i] - dark.data()[i]);
    return total;
  };

  SUBCASE("120 vs 600 lux, per-color strictness in aggregate") {
    RigConfig lo = rig_preset("lux120");
    RigConfig hi = rig_preset("lux600");
    int strictly_smaller = 0;
    for (int i = 0; i < 100; ++i) {
      std::array<double, 3> c{rng.uniform(), rng.uniform(), rng.uniform()};
      if (shift(hi, c) < shift(lo, c)) ++strictly_smaller;
    }
    CHECK(strictly_smaller == 100);
  }

  SUBCASE("nonincreasing across the preset ladder") {
    std::array<double, 3> c{0.9, 0.4, 0.1};
    double prev = 1e300;
    for (const auto& name : rig_preset_names()) {
      const double s = shift(rig_preset(name), c);
      CHECK(s <= prev + 1e-12);
      prev = s;
    }
  }
}

TEST_CASE("render_steady monotone in projection channels") {
  Image surface = random_surface(4, 4, 4);
  RigConfig rig = rig_preset("lux300");
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::array<double, 3> a{rng.uniform(), rng.uniform(), rng.uniform()};
    std::array<double, 3> b = a;
    const int ch = rng.uniform_int(0, 2);
    b[ch] = std::min(1.0, a[ch] + rng.uniform(0.0, 1.0 - a[ch]));
    Image oa = render_steady_color(surface, a, rig);
    Image ob = render_steady_color(surface, b, rig);
    for (size_t i = 0; i < oa.data().size(); ++i) CHECK(ob.data()[i] >= oa.data()[i] - 1e-12);
  }
}

TEST_CASE("render_sequence smoothing and determinism") {
  Image surface = random_surface(5, 5, 6);

  SUBCASE("alpha=1, no noise tracks steady state exactly") {
    RigConfig rig = rig_preset("lux180");
    rig.smoothing_alpha = 1.0;
    rig.noise_sigma = 0.0;
    Schedule sched{{std::array<double, 3>{0.8, 0.1, 0.3}, 3}, {std::nullopt, 3}};
    FrameSequence seq = render_sequence(surface, sched, rig, 0);
    Image target = render_steady_color(surface, {0.8, 0.1, 0.3}, rig);
    for (size_t i = 0; i < target.data().size(); ++i)
      CHECK(seq.frames[0].data()[i] == doctest::Approx(target.data()[i]));
  }

  SUBCASE("geometric decay at alpha = 0.3") {
    RigConfig rig = rig_preset("lux180");
    rig.smoothing_alpha = 0.3;
    rig.noise_sigma = 0.0;
    const std::array<double, 3> color{0.9, 0.9, 0.2};
    const int k = 10;
    Schedule sched{{color, k}};
    FrameSequence seq = render_sequence(surface, sched, rig, 0);
    Image start = render_steady_color(surface, {0, 0, 0}, rig);
    Image target = render_steady_color(surface, color, rig);
    const double decay = std::pow(1.0 - rig.smoothing_alpha, k);
    for (size_t i = 0; i < target.data().size(); ++i) {
      const double expected = target.data()[i] + decay * (start.data()[i] - target.data()[i]);
      CHECK(std::abs(seq.frames[k - 1].data()[i] - expected) < 1e-9);
    }
  }

  SUBCASE("same seed, same frames") {
    RigConfig rig = rig_preset("lux120");
    Schedule sched = profiling_schedule(255);
    FrameSequence a = render_sequence(surface, sched, rig, 99);
    FrameSequence b = render_sequence(surface, sched, rig, 99);
    REQUIRE(a.frames.size() == b.frames.size());
    for (size_t f = 0; f < a.frames.size(); ++f)
      CHECK(a.frames[f].data() == b.frames[f].data());
  }

  SUBCASE("noiseless sequence converges within (1-alpha)^10") {
    RigConfig rig = rig_preset("lux120");
    rig.noise_sigma = 0.0;
    rig.smoothing_alpha = 0.3;
    const std::array<double, 3> color{0.2, 0.6, 0.9};
    FrameSequence seq = render_sequence(surface, {{color, 10}}, rig, 0);
    Image target = render_steady_color(surface, color, rig);
    const double bound = std::pow(1.0 - rig.smoothing_alpha, 10) + 1e-12;
    for (size_t i = 0; i < target.data().size(); ++i)
      CHECK(std::abs(seq.frames[9].data()[i] - target.data()[i]) <= bound);
  }
}

TEST_CASE("profiling schedule color counts") {
  auto count_colors = [](const Schedule& s) {
    int n = 0;
    for (const auto& [c, f] : s)
      if (c) ++n;
    return n;
  };
  CHECK(count_colors(profiling_schedule(127)) == 27);
  CHECK(count_colors(profiling_schedule(255)) == 8);
  CHECK(count_colors(profiling_schedule(85)) == 64);
  // Leading no-projection block captures S.
  auto s = profiling_schedule(127);
  CHECK_FALSE(s.front().first.has_value());
  CHECK(s.front().second == 10);
}

TEST_CASE("median over noisy frames recovers steady state") {
  Image surface = random_surface(16, 16, 7);
  RigConfig rig = rig_preset("lux300");
  rig.noise_sigma = 0.01;
  rig.smoothing_alpha = 1.0;
  const std::array<double, 3> color{0.5, 0.7, 0.2};
  FrameSequence seq = render_sequence(surface, {{color, 11}}, rig, 12);
  Image target = render_steady_color(surface, color, rig);

  // Median of the last 10 frames, channel-wise.
  const double tol = 3.0 * rig.noise_sigma / std::sqrt(10.0);
  int ok = 0, total = 0;
  for (size_t i = 0; i < target.data().size(); ++i) {
    std::vector<double> vals;
    for (int f = 1; f < 11; ++f) vals.push_back(seq.frames[f].data()[i]);
    std::nth_element(vals.begin(), vals.begin() + 5, vals.end());
    const double med = vals[5];
    ++total;
    if (std::abs(med - target.data()[i]) <= tol) ++ok;
  }
  CHECK(static_cast<double>(ok) / total >= 0.95);
}

TEST_CASE("sequence persistence round trip") {
  Image surface = random_surface(4, 4, 8);
  RigConfig rig = rig_preset("lux440");
  FrameSequence seq = render_sequence(surface, {{std::array<double, 3>{1, 0, 0}, 2}, {std::nullopt, 2}},
                                      rig, 5);
  const std::string dir = "test_seq_tmp";
  save_sequence(seq, dir);
  FrameSequence loaded = load_sequence(dir);
  REQUIRE(loaded.frames.size() == seq.frames.size());
  CHECK(loaded.seed == seq.seed);
  CHECK(loaded.rig.ambient_lux == rig.ambient_lux);
  CHECK(loaded.annotations[0].projected);
  CHECK_FALSE(loaded.annotations[2].projected);
  // 8-bit quantization on disk
  for (size_t i = 0; i < seq.frames[0].data().size(); ++i)
    CHECK(std::abs(loaded.frames[0].data()[i] - seq.frames[0].data()[i]) <= 0.5 / 255.0 + 1e-9);
  std::filesystem::remove_all(dir);
}
