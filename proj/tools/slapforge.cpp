// slapforge: command-line front end for the projector-attack pipeline.
//
// Subcommands mirror the experimental procedure: profile the rig, fit the
// projection model, train target networks, craft a projection, evaluate it,
// run the defence suite, build transfer matrices, and compute physical
// feasibility. `pipeline` chains the steps and emits a full results tree.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "slap/attack.hpp"
#include "slap/augment.hpp"
#include "slap/defences.hpp"
#include "slap/evalharness.hpp"
#include "slap/projmodel.hpp"
#include "slap/projsim.hpp"
#include "slap/targets.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace slap;

namespace {

std::string g_stage = "startup";

void write_json(const json& j, const fs::path& path) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

int argmax(const Eigen::VectorXd& v) {
  Eigen::Index best;
  v.maxCoeff(&best);
  return static_cast<int>(best);
}

std::string default_workspace() {
  if (const char* env = std::getenv("SLAPFORGE_WORKSPACE")) return env;
  return "workspace";
}

Image stop_surface() { return augment::render_sign(augment::kStopClass, 64); }

std::vector<Image> make_backgrounds(int n, uint64_t seed) {
  std::vector<Image> bgs;
  for (int i = 0; i < n; ++i)
    bgs.push_back(augment::make_background(104, 104, seed + static_cast<uint64_t>(i)));
  return bgs;
}

struct Paths {
  fs::path ws;
  fs::path profile(const std::string& preset) const { return ws / "profile" / preset; }
  fs::path projection(const std::string& preset) const {
    return ws / "models" / ("projection_" + preset + ".json");
  }
  fs::path fit_report(const std::string& preset) const {
    return ws / "models" / ("fit_" + preset + ".json");
  }
  fs::path checkpoint(const std::string& name) const {
    return ws / "checkpoints" / (name + ".json");
  }
  fs::path attack_prefix(const std::string& preset, const std::string& target) const {
    return ws / "attacks" / (preset + "_" + target);
  }
};

targets::Classifier load_classifier(const Paths& paths, const std::string& name) {
  if (!fs::exists(paths.checkpoint(name)))
    throw ConfigError("missing checkpoint '" + name + "' — run the train subcommand first");
  return targets::Classifier::load(paths.checkpoint(name).string());
}

targets::Detector load_detector(const Paths& paths) {
  if (!fs::exists(paths.checkpoint("detector")))
    throw ConfigError("missing detector checkpoint — run the train subcommand first");
  return targets::Detector::load(paths.checkpoint("detector").string());
}

projmodel::ProjectionModel load_projection(const Paths& paths, const std::string& preset) {
  if (!fs::exists(paths.projection(preset)))
    throw ConfigError("missing projection model for " + preset + " — run fit first");
  return projmodel::ProjectionModel::load(paths.projection(preset).string());
}

// ---- stages -------------------------------------------------------------

json run_profile(const Paths& paths, const std::string& preset, int quantization,
                 uint64_t seed) {
  g_stage = "profile";
  projsim::RigConfig rig = projsim::rig_preset(preset);
  projsim::Schedule schedule = projsim::profiling_schedule(quantization);
  projsim::FrameSequence seq = projsim::render_sequence(stop_surface(), schedule, rig, seed);
  fs::create_directories(paths.profile(preset));
  projsim::save_sequence(seq, paths.profile(preset).string());
  std::printf("profile: %zu frames at preset %s -> %s\n", seq.frames.size(), preset.c_str(),
              paths.profile(preset).string().c_str());
  return json{{"preset", preset}, {"quantization", quantization}, {"seed", seed},
              {"frames", seq.frames.size()}};
}

json run_fit(const Paths& paths, const std::string& preset, int hidden, int epochs, double lr,
             uint64_t seed) {
  g_stage = "fit";
  if (!fs::exists(paths.profile(preset)))
    throw ConfigError("no profiling sequence for " + preset + " — run profile first");
  projsim::FrameSequence seq = projsim::load_sequence(paths.profile(preset).string());
  Image surface = projmodel::extract_surface(seq);
  std::vector<projmodel::ColorTriple> triples = projmodel::extract_triples(seq, surface, 5);
  auto [model, loss] = projmodel::fit(triples, hidden, epochs, lr, seed);
  fs::create_directories(paths.projection(preset).parent_path());
  model.save(paths.projection(preset).string());
  write_json(json{{"preset", preset}, {"triples", triples.size()}, {"fit_loss", loss},
                  {"hidden", hidden}, {"epochs", epochs}, {"seed", seed}},
             paths.fit_report(preset));
  std::printf("fit: %zu triples, loss %.4f -> %s\n", triples.size(), loss,
              paths.projection(preset).string().c_str());
  return json{{"preset", preset}, {"fit_loss", loss}, {"triples", triples.size()}};
}

json run_train(const Paths& paths, const std::string& model_kind, const std::string& arch,
               bool adversarial, int epochs, int per_class, double lr, uint64_t seed) {
  g_stage = "train";
  fs::create_directories(paths.ws / "checkpoints");
  if (model_kind == "detector") {
    auto data = augment::detector_dataset(per_class, seed + 6, 0.2);
    targets::Detector det =
        targets::train_detector(data, augment::kNumSignClasses, epochs, lr, seed);
    det.save(paths.checkpoint("detector").string());
    std::printf("train: detector (%d scenes, %d epochs) -> %s\n", per_class, epochs,
                paths.checkpoint("detector").string().c_str());
    return json{{"model", "detector"}, {"scenes", per_class}, {"epochs", epochs}, {"seed", seed}};
  }
  if (model_kind != "classifier") throw ConfigError("--model must be classifier or detector");
  auto data = augment::classifier_dataset(per_class, seed);
  std::optional<targets::FgsmConfig> fgsm;
  if (adversarial) fgsm = targets::FgsmConfig{};
  targets::Classifier cls = targets::train_classifier(data, arch, epochs, lr, seed, fgsm);
  const std::string name = "classifier_" + arch + (adversarial ? "_adv" : "");
  cls.save(paths.checkpoint(name).string());
  auto held = augment::classifier_dataset(40, seed + 99);
  const double acc = targets::accuracy(cls, held);
  std::printf("train: %s (%d/class, %d epochs) held-out accuracy %.3f -> %s\n", name.c_str(),
              per_class, epochs, acc, paths.checkpoint(name).string().c_str());
  return json{{"model", name}, {"per_class", per_class}, {"epochs", epochs}, {"seed", seed},
              {"held_accuracy", acc}};
}

attack::Target resolve_target(const std::string& name, targets::Classifier& cls_slot,
                              targets::Detector& det_slot, const Paths& paths) {
  if (name == "detector") {
    det_slot = load_detector(paths);
    return attack::Target::of(det_slot);
  }
  cls_slot = load_classifier(paths, name);
  return attack::Target::of(cls_slot);
}

json run_craft(const Paths& paths, const std::string& preset, const std::string& target_name,
               attack::AttackConfig cfg, int n_backgrounds) {
  g_stage = "craft";
  projmodel::ProjectionModel proj = load_projection(paths, preset);
  targets::Classifier cls;
  targets::Detector det;
  attack::Target target = resolve_target(target_name, cls, det, paths);
  Image surface = stop_surface();
  auto bgs = make_backgrounds(n_backgrounds, cfg.seed + 17);
  attack::AttackResult result = attack::craft(cfg, target, proj, surface, bgs);
  fs::create_directories(paths.ws / "attacks");
  const std::string prefix = paths.attack_prefix(preset, target_name).string();
  result.save(prefix);
  Rng rng(cfg.seed + 1);
  attack::SuccessReport quick =
      attack::evaluate_success(result.w, proj, surface, target, bgs, 200, rng, cfg.jobs);
  std::printf("craft: %s vs %s final_loss %.4f quick success %.3f -> %s.{json,png}\n",
              preset.c_str(), target_name.c_str(), result.final_loss, quick.success_rate,
              prefix.c_str());
  return json{{"preset", preset}, {"target", target_name}, {"final_loss", result.final_loss},
              {"quick_success", quick.success_rate}, {"seed", cfg.seed},
              {"epochs", cfg.epochs}};
}

json run_evaluate(const Paths& paths, const std::string& preset, const std::string& target_name,
                  int n_scenes, uint64_t seed, int jobs, json* cone_out = nullptr) {
  g_stage = "evaluate";
  const std::string prefix = paths.attack_prefix(preset, target_name).string();
  if (!fs::exists(prefix + ".json"))
    throw ConfigError("no crafted attack at " + prefix + " — run craft first");
  attack::AttackResult result = attack::AttackResult::load(prefix);
  projmodel::ProjectionModel proj = load_projection(paths, preset);
  targets::Classifier cls;
  targets::Detector det;
  attack::Target target = resolve_target(target_name, cls, det, paths);
  Image surface = stop_surface();
  auto bgs = make_backgrounds(8, seed + 17);

  Rng rng(seed);
  attack::SuccessReport cone =
      attack::evaluate_success(result.w, proj, surface, target, bgs, n_scenes, rng, jobs);
  evalharness::ApproachResult approach = evalharness::approach_sequence(
      result.w, proj, surface, target, 100, 18.0, 7.0, bgs, seed + 3, jobs);

  json cone_j;
  cone_j["success_rate"] = cone.success_rate;
  cone_j["n_scenes"] = cone.n_scenes;
  cone_j["total"] = cone.total;
  cone_j["succeeded"] = cone.succeeded;
  json bins = json::array();
  for (const auto& b : approach.bins)
    bins.push_back({{"d_far", b.d_far}, {"d_near", b.d_near}, {"n", b.n},
                    {"mean_score", b.mean_score}, {"std_score", b.std_score},
                    {"detect_rate", b.detect_rate}});
  json out{{"preset", preset}, {"target", target_name}, {"seed", seed},
           {"cone", cone_j},
           {"approach", {{"bins", bins}, {"overall_success", approach.overall_success},
                         {"n_frames", approach.n_frames}}}};
  write_json(out, paths.ws / "eval" / (preset + "_" + target_name + ".json"));
  std::printf("evaluate: success %.3f over %d scenes; approach success %.3f\n",
              cone.success_rate, cone.n_scenes, approach.overall_success);
  if (cone_out) *cone_out = cone_j;
  return out;
}

json run_feasibility(double lumens, double throw_ratio, double threshold_lux,
                     const std::string& curve_out) {
  g_stage = "feasibility";
  evalharness::ProjectorSpec spec{lumens, throw_ratio};
  const double d = evalharness::max_attack_distance(spec, threshold_lux);
  std::printf("max attack distance: %.2f m (%.0f lm, throw %.2f, %.0f lux threshold)\n", d,
              lumens, throw_ratio, threshold_lux);
  json out{{"lumens", lumens}, {"throw_ratio", throw_ratio}, {"threshold_lux", threshold_lux},
           {"max_distance_m", d}};
  if (!curve_out.empty()) {
    json curve = json::array();
    for (int i = 1; i <= 40; ++i) {
      const double dist = 0.5 * i;
      curve.push_back({{"distance_m", dist}, {"lux", evalharness::lux_on_sign(spec, dist)}});
    }
    out["curve"] = curve;
    write_json(out, curve_out);
  }
  return out;
}

json run_defend(const Paths& paths, const std::string& preset, uint64_t seed, int n_suspects,
                json* points_out = nullptr) {
  g_stage = "defend";
  targets::Classifier cls = load_classifier(paths, "classifier_deep");
  projmodel::ProjectionModel proj = load_projection(paths, preset);
  Image surface = stop_surface();
  auto bgs = make_backgrounds(8, seed + 17);
  Image post = augment::make_post_texture();
  augment::ParamRanges ranges = defences::patch_scene_ranges();

  // benign pools: one half fits the envelope, the other serves as test set
  auto pool = augment::classifier_dataset(14, seed + 21);
  std::vector<Image> benign_test, benign_suspects;
  for (size_t i = 0; i < pool.size(); ++i)
    ((i % 2) ? benign_test : benign_suspects).push_back(pool[i].image);
  benign_suspects.resize(std::min<size_t>(benign_suspects.size(), 50));
  benign_test.resize(std::min<size_t>(benign_test.size(), 50));

  defences::ThresholdCurve curve =
      defences::fit_threshold(cls, benign_suspects, benign_test, "random", seed);
  fs::create_directories(paths.ws / "defences");
  curve.save((paths.ws / "defences" / "threshold_curve.json").string());

  // input randomization sanity
  Rng rrng(seed + 5);
  int plain = 0, randomized = 0;
  for (const auto& d : pool) {
    plain += argmax(cls.probabilities(d.image)) == d.label;
    randomized +=
        argmax(cls.probabilities(defences::input_randomization(d.image, 36, rrng))) == d.label;
  }

  auto make_suspects = [&](const Image& sign_img, uint64_t sseed) {
    std::vector<Image> suspects;
    Rng srng(sseed);
    while (static_cast<int>(suspects.size()) < n_suspects) {
      const int bg = srng.uniform_int(0, static_cast<int>(bgs.size()) - 1);
      auto p = augment::sample_params(srng, 104, 104, ranges);
      if (p.sign_size < 55) continue;  // the saliency stage assumes a usable crop
      suspects.push_back(
          augment::crop_sign(augment::compose_with_retries(bgs[bg], sign_img, post, p, srng)));
    }
    return suspects;
  };

  auto score_suspects = [&](const std::vector<Image>& suspects, const std::string& kind,
                            json& points) {
    int flagged = 0;
    for (size_t i = 0; i < suspects.size(); ++i) {
      defences::SentinetVerdict v =
          defences::sentinet_score(cls, suspects[i], benign_test, "random", curve, seed + i);
      flagged += v.flagged;
      points.push_back({{"kind", kind}, {"avg_confidence", v.avg_confidence},
                        {"fooled_pct", v.fooled_pct}, {"flagged", v.flagged}});
    }
    return static_cast<double>(flagged) / static_cast<double>(suspects.size());
  };

  // projection suspects, from the crafted attack if present
  json points = json::array();
  double slap_rate = -1.0;
  const std::string prefix = paths.attack_prefix(preset, "classifier_deep").string();
  if (fs::exists(prefix + ".json")) {
    attack::AttackResult result = attack::AttackResult::load(prefix);
    Image adv = augment::adversarial_sign(proj, surface, result.w);
    slap_rate = score_suspects(make_suspects(adv, seed + 31), "slap", points);
  }

  // adversarial-patch positive control: sticker on the lower plate
  Image sign = stop_surface();
  size_t plate = 0;
  for (int y = 0; y < sign.height(); ++y)
    for (int x = 0; x < sign.width(); ++x)
      if (sign.alpha_or(y, x) >= 0.5) ++plate;
  const int side = static_cast<int>(std::sqrt(0.12 * static_cast<double>(plate)));
  defences::BoolMask mask(sign.height(), sign.width());
  const int y0 = sign.height() * 55 / 100, x0 = (sign.width() - side) / 2;
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) mask.at(y, x) = 1;
  Image patched = defences::craft_patch(cls, sign, mask, bgs, augment::kStopClass, 40, 30, 0.1,
                                        seed + 11, ranges, benign_suspects, 2);
  const double patch_rate = score_suspects(make_suspects(patched, seed + 41), "patch", points);
  const double benign_rate = score_suspects(benign_suspects, "benign", points);

  json out{{"preset", preset}, {"seed", seed},
           {"randomization", {{"n", pool.size()}, {"plain_correct", plain},
                              {"randomized_correct", randomized}}},
           {"flag_rates", {{"benign", benign_rate}, {"patch", patch_rate}}},
           {"points", points}};
  if (slap_rate >= 0.0) out["flag_rates"]["slap"] = slap_rate;
  write_json(out, paths.ws / "defences" / ("sentinet_" + preset + ".json"));
  std::string slap_str = slap_rate >= 0.0 ? " slap " + std::to_string(slap_rate) : std::string();
  std::printf("defend: flag rates benign %.2f patch %.2f%s\n", benign_rate, patch_rate,
              slap_str.c_str());
  if (points_out) *points_out = points;
  return out;
}

json run_transfer(const Paths& paths, const std::string& preset, int n_scenes, uint64_t seed,
                  int jobs, json* matrix_out = nullptr) {
  g_stage = "transfer";
  projmodel::ProjectionModel proj = load_projection(paths, preset);
  Image surface = stop_surface();
  auto bgs = make_backgrounds(8, seed + 17);

  const std::vector<std::string> names{"classifier_deep", "classifier_shallow",
                                       "classifier_deep_adv"};
  std::vector<targets::Classifier> models(names.size());
  std::vector<evalharness::TransferTarget> targets_v;
  std::vector<evalharness::TransferSource> sources;
  for (size_t i = 0; i < names.size(); ++i) {
    models[i] = load_classifier(paths, names[i]);
    targets_v.push_back({names[i], attack::Target::of(models[i])});
    const std::string prefix = paths.attack_prefix(preset, names[i]).string();
    if (fs::exists(prefix + ".json"))
      sources.push_back({names[i], attack::AttackResult::load(prefix).w});
  }
  if (sources.empty())
    throw ConfigError("no crafted attacks found for preset " + preset + " — run craft first");

  auto matrix =
      evalharness::transfer_matrix(sources, targets_v, proj, surface, bgs, n_scenes, seed, jobs);
  json cells = json::array();
  for (const auto& row : matrix) {
    for (const auto& cell : row) {
      cells.push_back({{"source", cell.source_model_id}, {"target", cell.target_model_id},
                       {"n_frames", cell.n_frames}, {"success_rate", cell.success_rate}});
      std::printf("  %s->%s %.3f", cell.source_model_id.c_str(), cell.target_model_id.c_str(),
                  cell.success_rate);
    }
    std::printf("\n");
  }
  json out{{"preset", preset}, {"seed", seed}, {"n_scenes", n_scenes}, {"cells", cells}};
  write_json(out, paths.ws / "transfer" / (preset + ".json"));
  if (matrix_out) *matrix_out = cells;
  return out;
}

json run_pipeline(const Paths& paths, const std::string& preset, uint64_t seed, int jobs,
                  attack::AttackConfig craft_cfg) {
  run_profile(paths, preset, 51, seed);
  json fit_j = run_fit(paths, preset, 24, 1500, 2e-2, seed);
  run_train(paths, "classifier", "deep", false, 20, 150, 1e-3, seed + 1);
  run_train(paths, "classifier", "shallow", false, 20, 150, 1e-3, seed + 2);
  run_train(paths, "classifier", "deep", true, 20, 150, 1e-3, seed + 3);

  json craft_j;
  for (const std::string target : {"classifier_deep", "classifier_shallow"}) {
    json j = run_craft(paths, preset, target, craft_cfg, 8);
    if (target == "classifier_deep") craft_j = j;
  }

  json cone_j;
  run_evaluate(paths, preset, "classifier_deep", 1000, seed + 4, jobs, &cone_j);
  json points_j;
  run_defend(paths, preset, seed + 5, 30, &points_j);
  json matrix_j;
  run_transfer(paths, preset, 200, seed + 6, jobs, &matrix_j);
  run_feasibility(5000.0, 2.93, 800.0, "");

  g_stage = "report";
  evalharness::ResultsBundle bundle;
  bundle.run_id = preset + "_seed" + std::to_string(seed);
  bundle.seed = seed;
  bundle.lux_sweep.push_back({preset, fit_j["fit_loss"].get<double>(),
                              craft_j["final_loss"].get<double>(),
                              cone_j["success_rate"].get<double>()});
  bundle.cone.n_scenes = cone_j["n_scenes"].get<int>();
  bundle.cone.success_rate = cone_j["success_rate"].get<double>();
  for (int a = 0; a < attack::SuccessReport::kAngleBins; ++a)
    for (int s = 0; s < attack::SuccessReport::kSizeBins; ++s) {
      bundle.cone.total[a][s] = cone_j["total"][a][s].get<int>();
      bundle.cone.succeeded[a][s] = cone_j["succeeded"][a][s].get<int>();
    }
  std::map<std::string, std::vector<evalharness::TransferCell>> by_source;
  for (const auto& cell : matrix_j)
    by_source[cell["source"].get<std::string>()].push_back(
        {cell["source"].get<std::string>(), cell["target"].get<std::string>(),
         cell["n_frames"].get<int>(), cell["success_rate"].get<double>()});
  for (auto& [src, row] : by_source) bundle.transfer.push_back(row);
  evalharness::ProjectorSpec spec{5000.0, 2.93};
  for (int i = 1; i <= 40; ++i)
    bundle.feasibility_curve.emplace_back(0.5 * i, evalharness::lux_on_sign(spec, 0.5 * i));
  for (const auto& p : points_j)
    bundle.sentinet_points.push_back({p["avg_confidence"].get<double>(),
                                      p["fooled_pct"].get<double>(), p["flagged"].get<bool>(),
                                      p["kind"].get<std::string>()});
  evalharness::report(bundle, (paths.ws / "results").string());
  std::printf("pipeline: results under %s\n",
              (paths.ws / "results" / bundle.run_id).string().c_str());
  return json{{"run_id", bundle.run_id}, {"preset", preset}, {"seed", seed}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slapforge — projector-based adversarial attack workbench"};
  app.require_subcommand(1);
  // flags beat the config file, which beats built-in preset defaults
  app.set_config("--config", "", "read defaults from a config file (flags override it)");

  std::string workspace = default_workspace();
  uint64_t seed = 7;
  int jobs = 1;
  app.add_option("--workspace", workspace, "workspace directory (or $SLAPFORGE_WORKSPACE)")
      ->capture_default_str();
  app.add_option("--seed", seed, "base RNG seed")->capture_default_str();
  app.add_option("--jobs", jobs, "worker threads for scene evaluation")->capture_default_str();

  std::string preset = "lux120";
  auto add_preset = [&](CLI::App* cmd) {
    cmd->add_option("--preset", preset, "rig preset (lux120/lux180/lux300/lux440/lux600)")
        ->capture_default_str();
  };

  auto* profile = app.add_subcommand("profile", "render the profiling frame sequence");
  int quantization = 51;
  add_preset(profile);
  profile->add_option("--quantization", quantization, "projected color lattice step")
      ->capture_default_str();

  auto* fit = app.add_subcommand("fit", "fit the projection model from a profile");
  int fit_hidden = 24, fit_epochs = 1500;
  double fit_lr = 2e-2;
  add_preset(fit);
  fit->add_option("--hidden", fit_hidden, "hidden width")->capture_default_str();
  fit->add_option("--epochs", fit_epochs, "fit epochs")->capture_default_str();
  fit->add_option("--lr", fit_lr, "fit learning rate")->capture_default_str();

  auto* train = app.add_subcommand("train", "train a target network");
  std::string train_model = "classifier", train_arch = "deep";
  bool train_adv = false;
  int train_epochs = 20, train_per_class = 150;
  double train_lr = 1e-3;
  train->add_option("--model", train_model, "classifier or detector")->capture_default_str();
  train->add_option("--arch", train_arch, "classifier architecture (deep/shallow)")
      ->capture_default_str();
  train->add_flag("--adversarial", train_adv, "FGSM adversarial training");
  train->add_option("--epochs", train_epochs, "training epochs")->capture_default_str();
  train->add_option("--per-class", train_per_class,
                    "crops per class (classifier) or scenes (detector)")
      ->capture_default_str();
  train->add_option("--lr", train_lr, "learning rate")->capture_default_str();

  auto* craft = app.add_subcommand("craft", "craft a projection against a target");
  std::string craft_target = "classifier_deep";
  attack::AttackConfig craft_cfg;
  add_preset(craft);
  craft->add_option("--target", craft_target,
                    "classifier_deep / classifier_shallow / classifier_deep_adv / detector")
      ->capture_default_str();
  craft->add_option("--epochs", craft_cfg.epochs, "craft epochs")->capture_default_str();
  craft->add_option("--images-per-epoch", craft_cfg.images_per_epoch, "EOT scenes per epoch")
      ->capture_default_str();
  craft->add_option("--batch-size", craft_cfg.batch_size, "scenes per batch")
      ->capture_default_str();
  craft->add_option("--lambda", craft_cfg.lambda, "perturbation-size penalty weight")
      ->capture_default_str();
  craft->add_option("--p-norm", craft_cfg.p_norm, "perturbation penalty norm order")
      ->capture_default_str();
  craft->add_option("--tv-weight", craft_cfg.tv_weight, "total-variation weight")
      ->capture_default_str();
  craft->add_option("--lr", craft_cfg.lr, "craft learning rate (0 = auto)")
      ->capture_default_str();
  craft->add_option("--grid", craft_cfg.grid_n, "projection grid resolution")
      ->capture_default_str();
  craft->add_option("--target-class", craft_cfg.target_class, "class to suppress")
      ->capture_default_str();

  auto* evaluate = app.add_subcommand("evaluate", "cone + approach evaluation of a crafted w");
  std::string eval_target = "classifier_deep";
  int eval_scenes = 1000;
  add_preset(evaluate);
  evaluate->add_option("--target", eval_target, "target checkpoint name")->capture_default_str();
  evaluate->add_option("--n-scenes", eval_scenes, "evaluation scenes")->capture_default_str();

  auto* defend = app.add_subcommand("defend", "input randomization + saliency defence suite");
  int defend_suspects = 30;
  add_preset(defend);
  defend->add_option("--n-suspects", defend_suspects, "suspect frames per kind")
      ->capture_default_str();

  auto* transfer = app.add_subcommand("transfer", "cross-model transfer matrix");
  int transfer_scenes = 200;
  add_preset(transfer);
  transfer->add_option("--n-scenes", transfer_scenes, "scenes per cell")->capture_default_str();

  auto* feasibility = app.add_subcommand("feasibility", "projector feasibility calculator");
  double lumens = 5000.0, throw_ratio = 2.93, threshold_lux = 800.0;
  std::string curve_out;
  feasibility->add_option("--lumens", lumens, "projector lumens")->capture_default_str();
  feasibility->add_option("--throw", throw_ratio, "throw ratio")->capture_default_str();
  feasibility->add_option("--threshold-lux", threshold_lux, "required lux on the sign")
      ->capture_default_str();
  feasibility->add_option("--curve-out", curve_out, "write a distance/lux curve JSON here");

  auto* pipeline = app.add_subcommand("pipeline", "run every step and emit a results tree");
  add_preset(pipeline);
  pipeline->add_option("--epochs", craft_cfg.epochs, "craft epochs")->capture_default_str();
  pipeline->add_option("--images-per-epoch", craft_cfg.images_per_epoch, "EOT scenes per epoch")
      ->capture_default_str();

  // let --workspace/--seed/--jobs appear after the subcommand too
  for (CLI::App* sub : app.get_subcommands(nullptr)) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  Paths paths{fs::path(workspace)};
  craft_cfg.seed = seed;
  craft_cfg.jobs = jobs;

  try {
    json out;
    std::string sub;
    if (profile->parsed()) {
      sub = "profile";
      out = run_profile(paths, preset, quantization, seed);
    } else if (fit->parsed()) {
      sub = "fit";
      out = run_fit(paths, preset, fit_hidden, fit_epochs, fit_lr, seed);
    } else if (train->parsed()) {
      sub = "train";
      out = run_train(paths, train_model, train_arch, train_adv, train_epochs, train_per_class,
                      train_lr, seed);
    } else if (craft->parsed()) {
      sub = "craft";
      out = run_craft(paths, preset, craft_target, craft_cfg, 8);
    } else if (evaluate->parsed()) {
      sub = "evaluate";
      out = run_evaluate(paths, preset, eval_target, eval_scenes, seed, jobs);
    } else if (defend->parsed()) {
      sub = "defend";
      out = run_defend(paths, preset, seed, defend_suspects);
    } else if (transfer->parsed()) {
      sub = "transfer";
      out = run_transfer(paths, preset, transfer_scenes, seed, jobs);
    } else if (feasibility->parsed()) {
      sub = "feasibility";
      out = run_feasibility(lumens, throw_ratio, threshold_lux, curve_out);
    } else if (pipeline->parsed()) {
      sub = "pipeline";
      out = run_pipeline(paths, preset, seed, jobs, craft_cfg);
    }
    // per-run manifest with the fully-resolved configuration
    json manifest{{"subcommand", sub}, {"workspace", paths.ws.string()},
                  {"resolved_config", app.config_to_str(true, false)}, {"result", out}};
    write_json(manifest, paths.ws / "manifests" / (sub + ".json"));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error in stage %s: %s\n", g_stage.c_str(), e.what());
    return 1;
  }
  return 0;
}
