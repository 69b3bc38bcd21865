#pragma once

#include <string>
#include <vector>

#include "slap/augment.hpp"
#include "slap/image.hpp"
#include "slap/projmodel.hpp"
#include "slap/rng.hpp"
#include "slap/targets.hpp"

namespace slap::attack {

/// Either a classifier or a detector, attacked through the same interface.
struct Target {
  const targets::Classifier* classifier = nullptr;
  const targets::Detector* detector = nullptr;

  static Target of(const targets::Classifier& c) { return Target{&c, nullptr}; }
  static Target of(const targets::Detector& d) { return Target{nullptr, &d}; }
  bool is_detector() const { return detector != nullptr; }
  double threshold() const {
    return detector ? detector->detection_threshold : classifier->detection_threshold;
  }
};

struct AttackConfig {
  int target_class = augment::kStopClass;
  int grid_n = 25;
  double lambda = 0.005;  // weight of the perturbation-size penalty
  int p_norm = 2;         // order of that penalty norm
  double tv_weight = 0.1;
  double lr = 0.0;        // 0 = auto: 0.05 classifiers, 0.005 detectors
  int epochs = 50;
  int images_per_epoch = 600;
  int batch_size = 20;
  double worst_fraction = 0.2;  // share of batches re-backpropagated per epoch
  uint64_t seed = 0;
  int jobs = 1;
  augment::ParamRanges scene_ranges = default_scene_ranges();

  static augment::ParamRanges default_scene_ranges() {
    augment::ParamRanges r;
    r.max_size = 85.0;  // keep the polygon inside 104 px backgrounds
    return r;
  }
  void validate() const;
};

struct AttackResult {
  Image w;  // grid_n x grid_n projection in [0,1]
  std::vector<double> loss_trace;  // per-epoch mean detection loss
  double final_loss = 0.0;         // detection loss of the reported w's epoch
  AttackConfig config;

  /// Writes <prefix>.json (exact values) and <prefix>.png (preview).
  void save(const std::string& prefix) const;
  static AttackResult load(const std::string& prefix);
};

/// Box-constraint variable substitution, elementwise tanh(v)/2 + 0.5.
Image substitute(const Image& v);
Image substitute_inverse(const Image& w);

/// Detection losses. Detector: sum of pre-suppression target-class scores.
/// Classifier: the target-class probability.
double loss_detector(const Eigen::VectorXd& raw_scores);
double loss_classifier(const Eigen::VectorXd& probs, int target_class);

/// Single-scene loss and its gradient with respect to the rendered sign.
/// Exposed for the miniature end-to-end gradient test and the patch baseline.
double scene_loss(const Target& target, int target_class, const augment::Scene& scene,
                  const augment::ComposeTape& tape, Image* sign_grad);

AttackResult craft(const AttackConfig& config, const Target& target,
                   const projmodel::ProjectionModel& model, const Image& surface,
                   const std::vector<Image>& backgrounds);

struct SuccessReport {
  static constexpr int kAngleBins = 5;  // perspective_x over [-30, 30]
  static constexpr int kSizeBins = 6;   // sign_size over [25, 90]
  double success_rate = 0.0;
  int n_scenes = 0;
  std::array<std::array<int, kSizeBins>, kAngleBins> total{};
  std::array<std::array<int, kSizeBins>, kAngleBins> succeeded{};
};

/// Fraction of fresh scenes in which the target class is not detected,
/// with an angle x size breakdown.
SuccessReport evaluate_success(const Image& w, const projmodel::ProjectionModel& model,
                               const Image& surface, const Target& target,
                               const std::vector<Image>& backgrounds, int n_scenes, Rng& rng,
                               int jobs = 1,
                               const augment::ParamRanges& ranges = AttackConfig::default_scene_ranges());

}  // namespace slap::attack
