#pragma once

#include <array>
#include <vector>

#include "slap/image.hpp"
#include "slap/imaging.hpp"
#include "slap/projmodel.hpp"
#include "slap/rng.hpp"

namespace slap::augment {

inline constexpr int kNumSignClasses = 8;
inline constexpr int kStopClass = 0;

/// One draw from the scene transformation distribution.
struct TransformParams {
  double perspective_x = 0.0;  // degrees, [-30, 30]
  double perspective_y = 0.0;  // degrees, [-30, 30], biased toward [0, 30]
  double rotation = 0.0;       // degrees, [-5, 5]
  double luma_delta = 0.0;     // [-13/255, 13/255]
  double sign_size = 64.0;     // rendered sign height in pixels, [25, 90]
  double aspect_squeeze = 1.0; // horizontal scale, [3/4, 1]
  double place_x = 0.0;        // sign center in background coordinates
  double place_y = 0.0;

  void validate() const;  // throws ConfigError on out-of-range fields
};

struct ParamRanges {
  double min_size = 25.0;
  double max_size = 90.0;
  double perspective_limit = 30.0;
  double rotation_limit = 5.0;
  double luma_limit = 13.0 / 255.0;
  double squeeze_min = 0.75;
  double perspective_y_pos_prob = 0.75;
};

struct Scene {
  Image image;
  std::array<std::array<double, 2>, 8> sign_polygon{};  // octagon, image coords
  TransformParams params;
  int background_id = 0;
  int label = 0;
};

/// Octagon vertices of a sign rendered at size n (flat top and bottom).
std::array<std::array<double, 2>, 8> sign_octagon(int n);

/// Procedural sign plate: square image with an octagonal alpha mask, a white
/// border, and a per-class body color + glyph.
Image render_sign(int class_id, int size);

/// Procedural road background: sky gradient, road trapezoid, lane dashes.
Image make_background(int h, int w, uint64_t seed);

/// Small gray texture stretched into the sign post at compose time.
Image make_post_texture();

TransformParams sample_params(Rng& rng, int bg_h, int bg_w, const ParamRanges& ranges = {});

Scene compose(const Image& background, const Image& sign, const Image& post,
              const TransformParams& p, int label = 0, int background_id = 0);

/// State needed to pull a scene-pixel gradient back to the sign pixels.
struct ComposeTape {
  Image sign;           // original sign (pre luma shift)
  Image sign_adjusted;  // after adjust_luma, input to the warp
  imaging::Homography h;
  double luma_delta = 0.0;
  std::vector<uint8_t> clamped;  // per scene channel, 1 where the composite clamped
};

Scene compose_traced(const Image& background, const Image& sign, const Image& post,
                     const TransformParams& p, ComposeTape& tape, int label = 0,
                     int background_id = 0);
/// Gradient with respect to the sign RGB channels.
Image compose_vjp(const ComposeTape& tape, const Image& grad_scene);

/// Axis-aligned crop of the scene's sign (polygon bbox plus margin), cubic
/// warped to out_size x out_size. Used as the classifier's view of a scene.
struct CropTape {
  imaging::Homography h;
  int scene_h = 0, scene_w = 0;
  std::vector<uint8_t> clamped;  // per crop channel, 1 where clamp01 fired
};
Image crop_sign(const Scene& scene, int out_size = 32, double margin = 0.2,
                CropTape* tape = nullptr);
/// Gradient with respect to the scene image.
Image crop_sign_vjp(const CropTape& tape, const Image& grad_crop);

/// Renders the adversarial sign P(x, w) for a grid projection variable w:
/// upsamples w to the surface size, runs the projection model per pixel, and
/// carries the surface's alpha mask over.
Image adversarial_sign(const projmodel::ProjectionModel& model, const Image& surface,
                       const Image& w_grid);

std::vector<Scene> make_batch(const projmodel::ProjectionModel& model, const Image& surface,
                              const Image& w_grid, const std::vector<Image>& backgrounds,
                              Rng& rng, int batch_size, const ParamRanges& ranges = {});

/// Compose with placement resampled on SignOutOfBounds (bounded retries).
Scene compose_with_retries(const Image& background, const Image& sign, const Image& post,
                           TransformParams p, Rng& rng, int label = 0, int background_id = 0,
                           int max_retries = 20);
Scene compose_traced_with_retries(const Image& background, const Image& sign, const Image& post,
                                  TransformParams p, Rng& rng, ComposeTape& tape, int label = 0,
                                  int background_id = 0, int max_retries = 20);

struct LabeledImage {
  Image image;
  int label = 0;
};

/// 32x32 sign crops rendered through the full compose pipeline.
std::vector<LabeledImage> classifier_dataset(int n_per_class, uint64_t seed,
                                             int n_classes = kNumSignClasses);

struct DetectorExample {
  Image image;  // 104 x 104
  bool has_sign = false;
  std::array<double, 4> box{};  // (x, y, w, h), normalized to [0,1]
  int label = 0;
};

std::vector<DetectorExample> detector_dataset(int n, uint64_t seed, double empty_fraction = 0.2);

/// Normalized bbox of a scene's sign polygon.
std::array<double, 4> polygon_bbox_norm(const Scene& scene);

}  // namespace slap::augment
