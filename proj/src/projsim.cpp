#include "slap/projsim.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "slap/errors.hpp"

namespace slap::projsim {

namespace fs = std::filesystem;
using nlohmann::json;

void RigConfig::validate() const {
  if (ambient_lux <= 0.0) throw ConfigError("ambient_lux must be > 0");
  if (projector_peak_lux < 0.0) throw ConfigError("projector_peak_lux must be >= 0");
  if (smoothing_alpha <= 0.0 || smoothing_alpha > 1.0)
    throw ConfigError("smoothing_alpha must be in (0,1]");
  if (gamma <= 0.0) throw ConfigError("gamma must be > 0");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
  if (exposure_gain <= 0.0) throw ConfigError("exposure_gain must be > 0");
  for (double r : surface_reflectance)
    if (r <= 0.0 || r > 1.0) throw ConfigError("surface_reflectance must be in (0,1]");
}

RigConfig rig_preset(const std::string& name) {
  double lux = 0.0;
  if (name == "lux120") lux = 120.0;
  else if (name == "lux180") lux = 180.0;
  else if (name == "lux300") lux = 300.0;
  else if (name == "lux440") lux = 440.0;
  else if (name == "lux600") lux = 600.0;
  else throw ConfigError("unknown rig preset: " + name);
  RigConfig rig;
  rig.ambient_lux = lux;
  rig.projector_peak_lux = 800.0;
  // Auto-exposure stand-in: a projection-free capture reproduces the surface.
  rig.exposure_gain = (rig.ambient_lux + rig.projector_peak_lux) / rig.ambient_lux;
  return rig;
}

std::vector<std::string> rig_preset_names() {
  return {"lux120", "lux180", "lux300", "lux440", "lux600"};
}

Image render_steady(const Image& surface, const Image& projection, const RigConfig& rig) {
  if (!surface.same_size(projection)) throw DimensionMismatch("surface vs projection");
  rig.validate();
  Image out(surface.height(), surface.width());
  const double norm = rig.ambient_lux + rig.projector_peak_lux;
  const double inv_gamma = 1.0 / rig.gamma;
  for (size_t i = 0; i < surface.data().size(); ++i) {
    const int c = static_cast<int>(i % 3);
    const double s_lin = std::pow(std::clamp(surface.data()[i], 0.0, 1.0), rig.gamma);
    const double p_lin = std::pow(std::clamp(projection.data()[i], 0.0, 1.0), rig.gamma);
    const double radiance =
        rig.ambient_lux * s_lin + rig.projector_peak_lux * p_lin * rig.surface_reflectance[c] * s_lin;
    out.data()[i] = std::clamp(std::pow(rig.exposure_gain * radiance / norm, inv_gamma), 0.0, 1.0);
  }
  if (surface.has_alpha()) out.alpha_plane() = surface.alpha_plane();
  return out;
}

Image render_steady_color(const Image& surface, const std::array<double, 3>& color,
                          const RigConfig& rig) {
  Image proj(surface.height(), surface.width());
  for (size_t i = 0; i < proj.data().size(); ++i) proj.data()[i] = color[i % 3];
  return render_steady(surface, proj, rig);
}

FrameSequence render_sequence(const Image& surface, const Schedule& schedule, const RigConfig& rig,
                              uint64_t seed) {
  if (schedule.empty()) throw ConfigError("schedule must be nonempty");
  rig.validate();
  FrameSequence seq;
  seq.rig = rig;
  seq.seed = seed;
  Rng rng(seed);

  // The camera starts adapted to the unlit surface.
  Image state = render_steady_color(surface, {0, 0, 0}, rig);
  for (const auto& [color, n_frames] : schedule) {
    const Image target = color ? render_steady_color(surface, *color, rig)
                               : render_steady_color(surface, {0, 0, 0}, rig);
    for (int f = 0; f < n_frames; ++f) {
      for (size_t i = 0; i < state.data().size(); ++i)
        state.data()[i] += rig.smoothing_alpha * (target.data()[i] - state.data()[i]);
      Image frame = state;
      if (rig.noise_sigma > 0.0)
        for (auto& v : frame.data()) v += rng.normal(0.0, rig.noise_sigma);
      frame.clamp01();
      FrameAnnotation ann;
      ann.projected = color.has_value();
      if (color) ann.color = *color;
      seq.frames.push_back(std::move(frame));
      seq.annotations.push_back(ann);
    }
  }
  return seq;
}

Schedule profiling_schedule(int quantization) {
  if (quantization < 1 || quantization > 255)
    throw ConfigError("quantization must be in [1,255]");
  std::vector<double> levels;
  for (int v = 0; v <= 255; v += quantization) levels.push_back(v / 255.0);
  Schedule schedule;
  schedule.emplace_back(std::nullopt, 10);  // capture S first
  for (double r : levels)
    for (double g : levels)
      for (double b : levels) {
        schedule.emplace_back(std::array<double, 3>{r, g, b}, 10);
        schedule.emplace_back(std::nullopt, 10);
      }
  return schedule;
}

namespace {
json rig_to_json(const RigConfig& rig) {
  return json{{"ambient_lux", rig.ambient_lux},
              {"projector_peak_lux", rig.projector_peak_lux},
              {"surface_reflectance", rig.surface_reflectance},
              {"gamma", rig.gamma},
              {"noise_sigma", rig.noise_sigma},
              {"smoothing_alpha", rig.smoothing_alpha},
              {"exposure_gain", rig.exposure_gain}};
}

RigConfig rig_from_json(const json& j) {
  RigConfig rig;
  rig.ambient_lux = j.at("ambient_lux");
  rig.projector_peak_lux = j.at("projector_peak_lux");
  rig.surface_reflectance = j.at("surface_reflectance");
  rig.gamma = j.at("gamma");
  rig.noise_sigma = j.at("noise_sigma");
  rig.smoothing_alpha = j.at("smoothing_alpha");
  rig.exposure_gain = j.at("exposure_gain");
  return rig;
}
}  // namespace

void save_sequence(const FrameSequence& seq, const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["seed"] = seq.seed;
  manifest["rig"] = rig_to_json(seq.rig);
  json frames = json::array();
  for (size_t i = 0; i < seq.frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%05zu.png", i);
    write_png(seq.frames[i], (fs::path(dir) / name).string());
    json f{{"file", name}, {"projected", seq.annotations[i].projected}};
    if (seq.annotations[i].projected) f["color"] = seq.annotations[i].color;
    frames.push_back(f);
  }
  manifest["frames"] = frames;
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

FrameSequence load_sequence(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("cannot read manifest in " + dir);
  json manifest = json::parse(in);
  FrameSequence seq;
  seq.seed = manifest.at("seed");
  seq.rig = rig_from_json(manifest.at("rig"));
  for (const auto& f : manifest.at("frames")) {
    seq.frames.push_back(read_png((fs::path(dir) / f.at("file").get<std::string>()).string()));
    FrameAnnotation ann;
    ann.projected = f.at("projected");
    if (ann.projected) ann.color = f.at("color");
    seq.annotations.push_back(ann);
  }
  return seq;
}

}  // namespace slap::projsim
