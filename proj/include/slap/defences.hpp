#pragma once

#include <string>
#include <vector>

#include "slap/augment.hpp"
#include "slap/image.hpp"
#include "slap/rng.hpp"
#include "slap/targets.hpp"

namespace slap::defences {

/// Binary mask with image geometry. Persisted as a black/white PNG.
struct BoolMask {
  int height = 0, width = 0;
  std::vector<uint8_t> data;  // row-major, 0 or 1

  BoolMask() = default;
  BoolMask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

  uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  size_t count() const;
  double coverage() const;  // fraction of pixels set
  bool empty_mask() const { return count() == 0; }

  void save_png(const std::string& path) const;
  static BoolMask load_png(const std::string& path);
};

/// Random resize to s x s with s uniform in [32, max_size], random zero-pad
/// to max_size, then resize back to the model's 32 x 32 input.
Image input_randomization(const Image& img, int max_size, Rng& rng);

/// Occlusion-based saliency: slide an 8x8 gray occluder with stride 4 over
/// the image, record the class-score drop per position, bilinearly accumulate
/// into a heatmap, threshold at 15% of the peak drop, and keep the connected
/// component containing the peak if it covers at least 2% of the pixels.
BoolMask saliency_mask(const targets::Classifier& model, const Image& img, int class_id);

/// Quadratic upper envelope of benign (avg_confidence, fooled_pct) points.
/// A suspect is flagged when its fooled_pct exceeds the envelope at its
/// avg_confidence by more than the slack band. The polynomial is only
/// trusted over the confidence range spanned by the benign fit points;
/// outside it the evaluation point is clamped to the nearer edge.
struct ThresholdCurve {
  std::array<double, 3> coeffs{};  // fooled = a*conf^2 + b*conf + c
  double conf_lo = 0.0, conf_hi = 1.0;  // benign fit domain
  double slack = 0.05;
  std::string family = "quadratic-envelope";

  double envelope(double avg_confidence) const;
  bool flags(double fooled_pct, double avg_confidence) const;

  void save(const std::string& path) const;
  static ThresholdCurve load(const std::string& path);
};

struct SentinetVerdict {
  double avg_confidence = 0.0;
  double fooled_pct = 0.0;
  bool flagged = false;
  BoolMask salient_mask;
};

/// Scores one suspect image: overlays its salient region onto each benign
/// test image (same coordinates) to measure fooled_pct, replaces the region
/// with the inert pattern ("random" or "checkerboard") to measure
/// avg_confidence, then applies the threshold curve. An empty salient mask
/// yields a benign verdict with zeroed scores.
SentinetVerdict sentinet_score(const targets::Classifier& model, const Image& suspect,
                               const std::vector<Image>& benign_test,
                               const std::string& inert_pattern, const ThresholdCurve& curve,
                               uint64_t seed = 0);

/// Fits the threshold curve so that every benign suspect scores as benign.
ThresholdCurve fit_threshold(const targets::Classifier& model,
                             const std::vector<Image>& benign_suspects,
                             const std::vector<Image>& benign_test,
                             const std::string& inert_pattern, uint64_t seed = 0);

inline augment::ParamRanges patch_scene_ranges() {
  augment::ParamRanges r;
  r.max_size = 85.0;  // keep the polygon inside 104 px backgrounds
  return r;
}

/// Adversarial-patch baseline: optimizes the sign pixels inside the mask
/// (tanh substitution, Adam) to minimize the target-class probability over
/// EOT scenes. The mask must cover at most 15% of the sign plate.
Image craft_patch(const targets::Classifier& model, const Image& sign, const BoolMask& mask,
                  const std::vector<Image>& backgrounds, int target_class, int epochs,
                  int scenes_per_epoch, double lr, uint64_t seed,
                  const augment::ParamRanges& ranges = patch_scene_ranges());

/// Universal adversarial sticker in classifier input space: a side x side
/// block at (top, left), optimized (tanh substitution, Adam) so that pasting
/// it onto crops drawn from the pool drives the prediction to to_class.
/// Each epoch averages the cross-entropy gradient over 8 random pool crops.
/// This concentrates all class evidence in one small region, which is
/// exactly the geometry a saliency-overlay detector is designed to catch.
Image craft_sticker(const targets::Classifier& model, const std::vector<Image>& pool,
                    int to_class, int top, int left, int side, int epochs = 300,
                    double lr = 0.05, uint64_t seed = 0);

/// Pastes a sticker returned by craft_sticker onto an image at (top, left).
Image apply_sticker(const Image& img, const Image& sticker, int top, int left);

}  // namespace slap::defences
