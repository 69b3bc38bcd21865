#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "slap/image.hpp"
#include "slap/rng.hpp"

namespace slap::projsim {

/// Environmental and camera parameters of the simulated projector-camera rig.
struct RigConfig {
  double ambient_lux = 120.0;
  double projector_peak_lux = 800.0;  // white-light lux delivered on the surface
  std::array<double, 3> surface_reflectance = {0.9, 0.9, 0.9};
  double gamma = 2.2;
  double noise_sigma = 0.01;
  double smoothing_alpha = 0.3;
  double exposure_gain = 1.0;

  void validate() const;
};

/// Presets named after the ambient-light settings used throughout the
/// experiments (120/180/300/440/600 lux). Exposure gain is set so a
/// projection-free capture reproduces the surface colors.
RigConfig rig_preset(const std::string& name);
std::vector<std::string> rig_preset_names();

struct FrameAnnotation {
  bool projected = false;
  std::array<double, 3> color = {0, 0, 0};
};

struct FrameSequence {
  std::vector<Image> frames;
  std::vector<FrameAnnotation> annotations;
  RigConfig rig;
  uint64_t seed = 0;
};

using Schedule = std::vector<std::pair<std::optional<std::array<double, 3>>, int>>;

/// Deterministic noiseless steady-state camera observation of `projection`
/// shone on `surface`. Monotone in every projection channel.
Image render_steady(const Image& surface, const Image& projection, const RigConfig& rig);

/// Convenience: steady-state for a uniform projected color.
Image render_steady_color(const Image& surface, const std::array<double, 3>& color,
                          const RigConfig& rig);

/// First-order temporal smoothing toward the per-frame steady-state target,
/// with i.i.d. Gaussian sensor noise per frame. Deterministic given seed.
FrameSequence render_sequence(const Image& surface, const Schedule& schedule, const RigConfig& rig,
                              uint64_t seed);

/// Profiling schedule: 10 leading no-projection frames, then each color of
/// the per-channel level lattice {0, q, 2q, ...} within [0,255] held for 10
/// frames and interleaved with 10 no-projection frames.
Schedule profiling_schedule(int quantization);

void save_sequence(const FrameSequence& seq, const std::string& dir);
FrameSequence load_sequence(const std::string& dir);

}  // namespace slap::projsim
