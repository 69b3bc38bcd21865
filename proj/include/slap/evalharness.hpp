#pragma once

#include <string>
#include <vector>

#include "slap/attack.hpp"
#include "slap/image.hpp"
#include "slap/projmodel.hpp"
#include "slap/rng.hpp"

namespace slap::evalharness {

/// Physical projector description for the feasibility calculator.
struct ProjectorSpec {
  double lumens = 0.0;
  double throw_ratio = 0.0;  // projection distance divided by image width

  void validate() const;  // throws InvalidSpec
};

/// Illuminance delivered on the sign at the given distance, assuming all
/// lumens land in a square image of width distance / throw_ratio.
double lux_on_sign(const ProjectorSpec& spec, double distance_m);

/// Largest distance at which the projector still delivers lux_threshold.
/// Exact inverse of lux_on_sign: lux_on_sign(spec, max_attack_distance(spec, L)) == L.
double max_attack_distance(const ProjectorSpec& spec, double lux_threshold);

struct TransferCell {
  std::string source_model_id;
  std::string target_model_id;
  int n_frames = 0;
  double success_rate = 0.0;
};

struct TransferSource {
  std::string id;
  Image w;  // projection crafted against the model with this id
};

struct TransferTarget {
  std::string id;
  attack::Target target;
};

/// Evaluates every source's projection against every target model on the
/// identical scene set (same seed for every cell). Row order follows
/// `sources`, column order follows `targets`; a cell is white-box when the
/// two ids match.
std::vector<std::vector<TransferCell>> transfer_matrix(
    const std::vector<TransferSource>& sources, const std::vector<TransferTarget>& targets,
    const projmodel::ProjectionModel& model, const Image& surface,
    const std::vector<Image>& backgrounds, int n_scenes, uint64_t seed, int jobs = 1);

/// Pinhole distance-to-pixel calibration: 7 m <-> 90 px, 18 m <-> 35 px.
double sign_size_at_distance(double distance_m);

struct ApproachBin {
  double d_near = 0.0, d_far = 0.0;  // metres covered by this bin
  int n = 0;
  double mean_score = 0.0, std_score = 0.0;  // target-class score
  double detect_rate = 0.0;                  // fraction of frames detected
};

struct ApproachResult {
  std::vector<ApproachBin> bins;  // ordered far -> near
  double overall_success = 0.0;   // fraction of frames with no detection
  int n_frames = 0;
};

/// Simulated drive toward the sign: n_steps frames from from_m down to to_m,
/// sign size set by the pinhole calibration, other scene parameters sampled.
/// Scores are grouped into at most 10 distance bins.
ApproachResult approach_sequence(const Image& w, const projmodel::ProjectionModel& model,
                                 const Image& surface, const attack::Target& target, int n_steps,
                                 double from_m, double to_m, const std::vector<Image>& backgrounds,
                                 uint64_t seed, int jobs = 1);

struct LuxSweepRow {
  std::string preset;
  double fit_loss = 0.0;       // projection-model fit loss at this preset
  double final_loss = 0.0;     // crafted attack's detection loss
  double attack_success = 0.0;
};

struct SentinetPoint {
  double avg_confidence = 0.0;
  double fooled_pct = 0.0;
  bool flagged = false;
  std::string kind;  // "benign", "slap", or "patch"
};

struct ResultsBundle {
  std::string run_id;
  uint64_t seed = 0;
  std::vector<LuxSweepRow> lux_sweep;
  attack::SuccessReport cone;
  std::vector<std::vector<TransferCell>> transfer;
  std::vector<std::pair<double, double>> feasibility_curve;  // (distance m, lux)
  std::vector<SentinetPoint> sentinet_points;
};

/// Writes results/<run_id>/{tables/*.json, tables/*.csv, plots/*.png,
/// manifest.json} under out_dir. JSON output is canonical (sorted keys), so
/// identical bundles serialize byte-identically. Throws ConfigError on an
/// incomplete bundle before creating any file.
void report(const ResultsBundle& bundle, const std::string& out_dir);

}  // namespace slap::evalharness
