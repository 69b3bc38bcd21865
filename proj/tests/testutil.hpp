#pragma once

// Shared trained fixtures, cached on disk under the test working directory so
// the heavyweight training runs happen once per checkout. Delete the
// shared_models/ directory after changing training code or data generation.

#include <filesystem>
#include <string>

#include "slap/augment.hpp"
#include "slap/targets.hpp"

namespace slap::testutil {

inline std::string model_cache_dir() {
  std::filesystem::create_directories("shared_models");
  return "shared_models";
}

inline targets::Detector shared_detector() {
  const std::string path = model_cache_dir() + "/detector.json";
  if (std::filesystem::exists(path)) return targets::Detector::load(path);
  auto data = augment::detector_dataset(1400, 11, 0.2);
  targets::Detector model = targets::train_detector(data, augment::kNumSignClasses, 24, 1e-3, 5);
  model.save(path);
  return model;
}

inline targets::Classifier shared_classifier(const std::string& arch, bool adversarial = false) {
  const std::string path =
      model_cache_dir() + "/classifier_" + arch + (adversarial ? "_adv" : "") + ".json";
  if (std::filesystem::exists(path)) return targets::Classifier::load(path);
  auto data = augment::classifier_dataset(150, 1);
  std::optional<targets::FgsmConfig> fgsm;
  if (adversarial) fgsm = targets::FgsmConfig{};
  targets::Classifier model = targets::train_classifier(data, arch, 20, 1e-3, 5, fgsm);
  model.save(path);
  return model;
}

/// Projection model trained to reproduce the surface color regardless of the
/// projected color, with the stop-sign palette anchored for accuracy there.
inline projmodel::ProjectionModel identity_projection() {
  const std::string path = model_cache_dir() + "/projection_identity.json";
  if (std::filesystem::exists(path)) return projmodel::ProjectionModel::load(path);
  std::vector<projmodel::ColorTriple> triples;
  Rng rng(101);
  for (int i = 0; i < 120; ++i) {
    projmodel::ColorTriple t;
    for (int c = 0; c < 3; ++c) {
      t.c_s[c] = rng.uniform();
      t.c_p[c] = rng.uniform();
      t.c_o[c] = t.c_s[c];
    }
    triples.push_back(t);
  }
  Image sign = augment::render_sign(0, 64);
  for (int k = 0; k < 40;) {
    const int y = rng.uniform_int(0, 63), x = rng.uniform_int(0, 63);
    if (sign.alpha(y, x) < 1.0) continue;
    projmodel::ColorTriple t;
    for (int c = 0; c < 3; ++c) {
      t.c_s[c] = sign.at(y, x, c);
      t.c_p[c] = rng.uniform();
      t.c_o[c] = t.c_s[c];
    }
    triples.push_back(t);
    ++k;
  }
  auto [model, loss] = projmodel::fit(triples, 24, 1500, 2e-2, 3);
  if (loss >= 0.015) throw Error("identity projection fixture failed to converge");
  model.save(path);
  return std::move(model);
}

/// Projection model with a real dependence on the projected color, so the
/// attack has a handle to pull on: c_o = 0.3 c_s + 0.5 c_p + 0.1.
inline projmodel::ProjectionModel affine_projection() {
  const std::string path = model_cache_dir() + "/projection_affine.json";
  if (std::filesystem::exists(path)) return projmodel::ProjectionModel::load(path);
  std::vector<projmodel::ColorTriple> triples;
  Rng rng(202);
  for (int i = 0; i < 120; ++i) {
    projmodel::ColorTriple t;
    for (int c = 0; c < 3; ++c) {
      t.c_s[c] = rng.uniform();
      t.c_p[c] = rng.uniform();
      t.c_o[c] = 0.3 * t.c_s[c] + 0.5 * t.c_p[c] + 0.1;
    }
    triples.push_back(t);
  }
  auto [model, loss] = projmodel::fit(triples, 16, 1500, 2e-2, 4);
  if (loss >= 0.02) throw Error("affine projection fixture failed to converge");
  model.save(path);
  return std::move(model);
}

}  // namespace slap::testutil
