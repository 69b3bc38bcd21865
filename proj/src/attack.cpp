#include "slap/attack.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "slap/imaging.hpp"
#include "slap/nn.hpp"
#include "slap/parallel.hpp"

namespace slap::attack {

using nlohmann::json;
using Vec = Eigen::VectorXd;

namespace {

struct SceneDraw {
  int bg = 0;
  augment::TransformParams params;
};

struct BatchEval {
  double detection_loss = 0.0;  // mean over scenes
  double total_loss = 0.0;      // detection + lambda penalty + tv
  Image v_grad;
};

/// One forward/backward pass of the full objective over a batch of scenes.
/// When `sample` is set, scenes are drawn from per-index substreams of `base`
/// and recorded in `draws`; otherwise the stored draws are re-rendered.
BatchEval eval_batch(const Image& v, const AttackConfig& cfg, const Target& target,
                     const projmodel::ProjectionModel& model, const Image& surface,
                     const std::vector<Image>& backgrounds, const Image& post, const Rng& base,
                     std::vector<SceneDraw>& draws, bool sample, bool want_grad) {
  const int n = cfg.grid_n;
  Image w = substitute(v);
  Image proj = imaging::grid_upsample(w, surface.height(), surface.width());
  projmodel::ProjectionModel::Tape ptape;
  Image sign = model.predict_image_traced(surface, proj, ptape);
  sign.alpha_plane() = surface.alpha_plane();

  // perturbation-size penalty over the sign mask, per-channel-normalized
  double pen = 0.0;
  long n_mask = 0;
  for (int y = 0; y < sign.height(); ++y)
    for (int x = 0; x < sign.width(); ++x) {
      if (sign.alpha_or(y, x) < 0.5) continue;
      for (int c = 0; c < 3; ++c) {
        pen += std::pow(std::abs(sign.at(y, x, c) - surface.at(y, x, c)), cfg.p_norm);
        ++n_mask;
      }
    }
  if (n_mask == 0) throw EmptyMask("surface alpha mask is empty");
  pen = std::pow(pen / static_cast<double>(n_mask), 1.0 / cfg.p_norm);

  if (sample) draws.assign(cfg.batch_size, SceneDraw{});
  std::vector<double> losses(cfg.batch_size, 0.0);
  std::vector<Image> grads(cfg.batch_size);
  parallel_for(cfg.batch_size, cfg.jobs, [&](int i) {
    Rng rng = base.substream(static_cast<uint64_t>(i));
    augment::ComposeTape tape;
    augment::Scene scene;
    if (sample) {
      const int bg = rng.uniform_int(0, static_cast<int>(backgrounds.size()) - 1);
      augment::TransformParams p =
          augment::sample_params(rng, backgrounds[bg].height(), backgrounds[bg].width(), cfg.scene_ranges);
      scene = augment::compose_traced_with_retries(backgrounds[bg], sign, post, p, rng, tape);
      draws[i] = {bg, scene.params};
    } else {
      scene = augment::compose_traced(backgrounds[draws[i].bg], sign, post, draws[i].params, tape);
    }
    losses[i] = scene_loss(target, cfg.target_class, scene, tape, want_grad ? &grads[i] : nullptr);
  });

  BatchEval out;
  for (double l : losses) out.detection_loss += l;
  out.detection_loss /= cfg.batch_size;
  const double tv = imaging::total_variation(w);
  out.total_loss = out.detection_loss + cfg.lambda * pen + cfg.tv_weight * tv;
  if (!want_grad) return out;

  Image sign_grad(sign.height(), sign.width());
  for (const auto& g : grads)
    for (size_t k = 0; k < sign_grad.data().size(); ++k)
      sign_grad.data()[k] += g.data()[k] / cfg.batch_size;
  if (pen > 0.0) {
    const double scale = cfg.lambda * std::pow(pen, 1.0 - cfg.p_norm) / static_cast<double>(n_mask);
    for (int y = 0; y < sign.height(); ++y)
      for (int x = 0; x < sign.width(); ++x) {
        if (sign.alpha_or(y, x) < 0.5) continue;
        for (int c = 0; c < 3; ++c) {
          const double d = sign.at(y, x, c) - surface.at(y, x, c);
          sign_grad.at(y, x, c) +=
              scale * std::pow(std::abs(d), cfg.p_norm - 1) * (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0);
        }
      }
  }
  Image g_proj = model.predict_image_vjp(ptape, sign_grad);
  Image g_w = imaging::grid_upsample_vjp(g_proj, n);
  Image tv_g = imaging::total_variation_vjp(w);
  for (size_t k = 0; k < g_w.data().size(); ++k) g_w.data()[k] += cfg.tv_weight * tv_g.data()[k];
  // through the substitution: dw/dv = (1 - tanh(v)^2) / 2
  out.v_grad = Image(n, n);
  for (size_t k = 0; k < g_w.data().size(); ++k) {
    const double t = 2.0 * w.data()[k] - 1.0;
    out.v_grad.data()[k] = g_w.data()[k] * (1.0 - t * t) / 2.0;
  }
  return out;
}

}  // namespace

void AttackConfig::validate() const {
  if (grid_n < 1) throw ConfigError("grid_n must be >= 1");
  if (worst_fraction <= 0.0 || worst_fraction > 1.0) throw ConfigError("worst_fraction in (0,1]");
  if (lambda < 0.0 || tv_weight < 0.0) throw ConfigError("penalty weights must be >= 0");
  if (p_norm < 1) throw ConfigError("p_norm must be >= 1");
  if (batch_size < 1 || images_per_epoch < batch_size)
    throw ConfigError("need at least one full batch per epoch");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
}

Image substitute(const Image& v) {
  Image w(v.height(), v.width());
  for (size_t i = 0; i < v.data().size(); ++i) w.data()[i] = std::tanh(v.data()[i]) / 2.0 + 0.5;
  return w;
}

Image substitute_inverse(const Image& w) {
  Image v(w.height(), w.width());
  for (size_t i = 0; i < w.data().size(); ++i) {
    const double x = w.data()[i];
    if (x <= 0.0 || x >= 1.0) throw ConfigError("substitute_inverse needs values in (0,1)");
    v.data()[i] = std::atanh(2.0 * x - 1.0);
  }
  return v;
}

double loss_detector(const Eigen::VectorXd& raw_scores) { return raw_scores.sum(); }

double loss_classifier(const Eigen::VectorXd& probs, int target_class) {
  if (target_class < 0 || target_class >= probs.size()) throw ConfigError("bad target class");
  return probs[target_class];
}

double scene_loss(const Target& target, int target_class, const augment::Scene& scene,
                  const augment::ComposeTape& tape, Image* sign_grad) {
  if (target.is_detector()) {
    const auto& det = *target.detector;
    targets::DetectorTape dtape;
    Vec scores = targets::raw_scores_traced(det, scene.image, target_class, dtape);
    const double loss = loss_detector(scores);
    if (sign_grad) {
      Vec gs = Vec::Ones(scores.size());
      Image scene_grad = targets::raw_scores_vjp(det, dtape, gs);
      *sign_grad = augment::compose_vjp(tape, scene_grad);
    }
    return loss;
  }
  const auto& cls = *target.classifier;
  augment::CropTape ctape;
  Image crop = augment::crop_sign(scene, 32, 0.2, &ctape);
  nn::Network::Trace trace;
  Vec logits = cls.logits_traced(crop, trace);
  Vec p = nn::softmax(logits);
  const double loss = loss_classifier(p, target_class);
  if (sign_grad) {
    Vec gy(p.size());
    for (long j = 0; j < p.size(); ++j)
      gy[j] = p[target_class] * ((j == target_class ? 1.0 : 0.0) - p[j]);
    Image crop_grad = cls.input_vjp(trace, gy);
    Image scene_grad = augment::crop_sign_vjp(ctape, crop_grad);
    *sign_grad = augment::compose_vjp(tape, scene_grad);
  }
  return loss;
}

AttackResult craft(const AttackConfig& config, const Target& target,
                   const projmodel::ProjectionModel& model, const Image& surface,
                   const std::vector<Image>& backgrounds) {
  AttackConfig cfg = config;
  cfg.validate();
  if (cfg.lr == 0.0) cfg.lr = target.is_detector() ? 0.005 : 0.05;
  if (backgrounds.empty()) throw ConfigError("no backgrounds");
  if (!surface.has_alpha()) throw ConfigError("surface needs an alpha mask");
  if (surface.height() != surface.width()) throw ConfigError("surface must be square");

  const int n = cfg.grid_n;
  const int n_batches = cfg.images_per_epoch / cfg.batch_size;
  const int n_worst =
      std::clamp(static_cast<int>(std::lround(cfg.worst_fraction * n_batches)), 1, n_batches);
  Image post = augment::make_post_texture();

  Vec v_flat = Vec::Zero(3L * n * n);  // zeros: w starts at mid-gray 0.5
  Image v(n, n);
  const auto sync_v = [&] { std::copy(v_flat.data(), v_flat.data() + v_flat.size(), v.data().begin()); };
  nn::AdamVec opt(3L * n * n, cfg.lr);
  Rng root(cfg.seed);
  uint64_t batch_counter = 0;

  AttackResult result;
  result.config = cfg;
  double best = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::vector<SceneDraw>> draws(n_batches);
    std::vector<double> batch_total(n_batches);
    double det_sum = 0.0;
    for (int b = 0; b < n_batches; ++b) {
      Rng base = root.substream(batch_counter++);
      sync_v();
      BatchEval ev = eval_batch(v, cfg, target, model, surface, backgrounds, post, base,
                                draws[b], true, true);
      if (!std::isfinite(ev.total_loss))
        throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(b));
      Vec g = Eigen::Map<const Vec>(ev.v_grad.data().data(), v_flat.size());
      opt.step(v_flat, g);
      batch_total[b] = ev.total_loss;
      det_sum += ev.detection_loss;
    }
    // a second pass over this epoch's worst batches, scenes retained
    std::vector<int> order(n_batches);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return batch_total[a] > batch_total[b]; });
    for (int k = 0; k < n_worst; ++k) {
      const int b = order[k];
      Rng base = root.substream(0);  // unused when not sampling
      sync_v();
      BatchEval ev = eval_batch(v, cfg, target, model, surface, backgrounds, post, base,
                                draws[b], false, true);
      if (!std::isfinite(ev.total_loss))
        throw NonFiniteLoss("non-finite loss in worst-batch pass, epoch " + std::to_string(epoch));
      Vec g = Eigen::Map<const Vec>(ev.v_grad.data().data(), v_flat.size());
      opt.step(v_flat, g);
    }
    const double epoch_det = det_sum / n_batches;
    result.loss_trace.push_back(epoch_det);
    if (epoch_det < best) {
      best = epoch_det;
      sync_v();
      result.w = substitute(v);
      result.final_loss = epoch_det;
    }
  }
  return result;
}

SuccessReport evaluate_success(const Image& w, const projmodel::ProjectionModel& model,
                               const Image& surface, const Target& target,
                               const std::vector<Image>& backgrounds, int n_scenes, Rng& rng,
                               int jobs, const augment::ParamRanges& ranges) {
  if (n_scenes < 1) throw ConfigError("n_scenes must be >= 1");
  if (backgrounds.empty()) throw ConfigError("no backgrounds");
  Image sign = augment::adversarial_sign(model, surface, w);
  Image post = augment::make_post_texture();
  const int target_class = augment::kStopClass;

  SuccessReport report;
  report.n_scenes = n_scenes;
  std::vector<uint8_t> ok(n_scenes, 0);
  std::vector<std::pair<int, int>> bins(n_scenes);
  const Rng base = rng.substream(rng.next_u64());
  parallel_for(n_scenes, jobs, [&](int i) {
    Rng r = base.substream(static_cast<uint64_t>(i));
    const int bg = r.uniform_int(0, static_cast<int>(backgrounds.size()) - 1);
    augment::TransformParams p =
        augment::sample_params(r, backgrounds[bg].height(), backgrounds[bg].width(), ranges);
    augment::Scene scene =
        augment::compose_with_retries(backgrounds[bg], sign, post, p, r, target_class, bg);

    bool detected;
    if (target.is_detector()) {
      detected = false;
      for (const auto& d : targets::detect(*target.detector, scene.image))
        if (d.class_id == target_class) detected = true;
    } else {
      Image crop = augment::crop_sign(scene);
      detected = target.classifier->probabilities(crop)[target_class] > target.threshold();
    }
    ok[i] = detected ? 0 : 1;

    const int abin = std::clamp(static_cast<int>((scene.params.perspective_x + 30.0) / 12.0), 0,
                                SuccessReport::kAngleBins - 1);
    const int sbin = std::clamp(static_cast<int>((scene.params.sign_size - 25.0) / (65.0 / 6.0)), 0,
                                SuccessReport::kSizeBins - 1);
    bins[i] = {abin, sbin};
  });
  int wins = 0;
  for (int i = 0; i < n_scenes; ++i) {
    report.total[bins[i].first][bins[i].second] += 1;
    report.succeeded[bins[i].first][bins[i].second] += ok[i];
    wins += ok[i];
  }
  report.success_rate = static_cast<double>(wins) / n_scenes;
  return report;
}

void AttackResult::save(const std::string& prefix) const {
  json j;
  j["grid_n"] = config.grid_n;
  j["target_class"] = config.target_class;
  j["lambda"] = config.lambda;
  j["p_norm"] = config.p_norm;
  j["tv_weight"] = config.tv_weight;
  j["lr"] = config.lr;
  j["epochs"] = config.epochs;
  j["images_per_epoch"] = config.images_per_epoch;
  j["batch_size"] = config.batch_size;
  j["worst_fraction"] = config.worst_fraction;
  j["seed"] = config.seed;
  j["final_loss"] = final_loss;
  j["loss_trace"] = loss_trace;
  j["w"] = w.data();
  std::ofstream out(prefix + ".json");
  if (!out) throw IoError("cannot write " + prefix + ".json");
  out << j.dump() << "\n";
  write_png(imaging::grid_upsample(w, w.height() * 8, w.width() * 8), prefix + ".png");
}

AttackResult AttackResult::load(const std::string& prefix) {
  std::ifstream in(prefix + ".json");
  if (!in) throw IoError("cannot read " + prefix + ".json");
  json j = json::parse(in);
  AttackResult r;
  r.config.grid_n = j.at("grid_n");
  r.config.target_class = j.at("target_class");
  r.config.lambda = j.at("lambda");
  r.config.p_norm = j.at("p_norm");
  r.config.tv_weight = j.at("tv_weight");
  r.config.lr = j.at("lr");
  r.config.epochs = j.at("epochs");
  r.config.images_per_epoch = j.at("images_per_epoch");
  r.config.batch_size = j.at("batch_size");
  r.config.worst_fraction = j.at("worst_fraction");
  r.config.seed = j.at("seed");
  r.final_loss = j.at("final_loss");
  r.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  const int n = r.config.grid_n;
  r.w = Image(n, n);
  r.w.data() = j.at("w").get<std::vector<double>>();
  if (r.w.data().size() != static_cast<size_t>(3 * n * n)) throw IoError("bad w payload");
  return r;
}

}  // namespace slap::attack
