#include "slap/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "slap/augment.hpp"
#include "slap/parallel.hpp"
#include "slap/targets.hpp"

namespace slap::evalharness {

namespace fs = std::filesystem;
using nlohmann::json;

void ProjectorSpec::validate() const {
  if (!(lumens > 0.0)) throw InvalidSpec("lumens must be > 0");
  if (!(throw_ratio > 0.0)) throw InvalidSpec("throw_ratio must be > 0");
}

double lux_on_sign(const ProjectorSpec& spec, double distance_m) {
  spec.validate();
  if (!(distance_m > 0.0)) throw InvalidSpec("distance must be > 0");
  const double width = distance_m / spec.throw_ratio;
  return spec.lumens / (width * width);
}

double max_attack_distance(const ProjectorSpec& spec, double lux_threshold) {
  spec.validate();
  if (!(lux_threshold > 0.0)) throw InvalidSpec("lux threshold must be > 0");
  return spec.throw_ratio * std::sqrt(spec.lumens / lux_threshold);
}

std::vector<std::vector<TransferCell>> transfer_matrix(
    const std::vector<TransferSource>& sources, const std::vector<TransferTarget>& targets,
    const projmodel::ProjectionModel& model, const Image& surface,
    const std::vector<Image>& backgrounds, int n_scenes, uint64_t seed, int jobs) {
  if (sources.empty()) throw ConfigError("transfer matrix needs at least one source");
  if (targets.size() < 2) throw ConfigError("transfer matrix needs at least two target models");
  std::vector<std::vector<TransferCell>> matrix;
  matrix.reserve(sources.size());
  for (const auto& src : sources) {
    std::vector<TransferCell> row;
    row.reserve(targets.size());
    for (const auto& tgt : targets) {
      // a fresh rng per cell keeps the scene set identical across the matrix
      Rng rng(seed);
      attack::SuccessReport rep = attack::evaluate_success(src.w, model, surface, tgt.target,
                                                           backgrounds, n_scenes, rng, jobs);
      row.push_back({src.id, tgt.id, rep.n_scenes, rep.success_rate});
    }
    matrix.push_back(std::move(row));
  }
  return matrix;
}

double sign_size_at_distance(double distance_m) {
  if (!(distance_m > 0.0)) throw InvalidSpec("distance must be > 0");
  return 630.0 / distance_m;  // 7 m <-> 90 px, 18 m <-> 35 px
}

ApproachResult approach_sequence(const Image& w, const projmodel::ProjectionModel& model,
                                 const Image& surface, const attack::Target& target, int n_steps,
                                 double from_m, double to_m, const std::vector<Image>& backgrounds,
                                 uint64_t seed, int jobs) {
  if (n_steps < 1) throw ConfigError("n_steps must be >= 1");
  if (!(from_m > to_m) || !(to_m > 0.0)) throw ConfigError("need from_m > to_m > 0");
  if (backgrounds.empty()) throw ConfigError("no backgrounds");
  const int target_class = augment::kStopClass;

  Image sign = augment::adversarial_sign(model, surface, w);
  Image post = augment::make_post_texture();
  augment::ParamRanges ranges;
  ranges.max_size = 85.0;

  const int n_bins = std::min(10, n_steps);
  ApproachResult out;
  out.bins.resize(n_bins);
  out.n_frames = n_steps;
  const double span = from_m - to_m;
  for (int b = 0; b < n_bins; ++b) {
    out.bins[b].d_far = from_m - span * b / n_bins;
    out.bins[b].d_near = from_m - span * (b + 1) / n_bins;
  }

  std::vector<double> scores(n_steps, 0.0);
  std::vector<uint8_t> detected(n_steps, 0);
  const Rng base(seed);
  parallel_for(n_steps, jobs, [&](int i) {
    const double d = n_steps == 1 ? from_m : from_m - span * i / (n_steps - 1);
    Rng rng = base.substream(static_cast<uint64_t>(i));
    const int bg = rng.uniform_int(0, static_cast<int>(backgrounds.size()) - 1);
    augment::TransformParams p =
        augment::sample_params(rng, backgrounds[bg].height(), backgrounds[bg].width(), ranges);
    p.sign_size = std::clamp(sign_size_at_distance(d), ranges.min_size, ranges.max_size);
    augment::Scene scene =
        augment::compose_with_retries(backgrounds[bg], sign, post, p, rng, target_class, bg);
    if (target.is_detector()) {
      double best = 0.0;
      for (const auto& det : targets::detect(*target.detector, scene.image))
        if (det.class_id == target_class) best = std::max(best, det.score);
      scores[i] = best;
      detected[i] = best > 0.0;
    } else {
      const double p_t =
          target.classifier->probabilities(augment::crop_sign(scene))[target_class];
      scores[i] = p_t;
      detected[i] = p_t > target.threshold();
    }
  });

  int total_detected = 0;
  for (int i = 0; i < n_steps; ++i) {
    const double d = n_steps == 1 ? from_m : from_m - span * i / (n_steps - 1);
    int b = n_bins == 1 ? 0
                        : std::min(n_bins - 1,
                                   static_cast<int>((from_m - d) / span * n_bins));
    auto& bin = out.bins[b];
    bin.n += 1;
    bin.mean_score += scores[i];
    bin.detect_rate += detected[i];
    total_detected += detected[i];
  }
  for (auto& bin : out.bins) {
    if (bin.n == 0) continue;
    bin.mean_score /= bin.n;
    bin.detect_rate /= bin.n;
  }
  for (int i = 0; i < n_steps; ++i) {
    const double d = n_steps == 1 ? from_m : from_m - span * i / (n_steps - 1);
    int b = n_bins == 1 ? 0
                        : std::min(n_bins - 1,
                                   static_cast<int>((from_m - d) / span * n_bins));
    const double dev = scores[i] - out.bins[b].mean_score;
    out.bins[b].std_score += dev * dev;
  }
  for (auto& bin : out.bins)
    if (bin.n > 0) bin.std_score = std::sqrt(bin.std_score / bin.n);
  out.overall_success = 1.0 - static_cast<double>(total_detected) / n_steps;
  return out;
}

namespace {

// ---- minimal plotting: filled cells, polylines, dots on a white canvas ----

void fill_rect(Image& img, int y0, int x0, int y1, int x1, double r, double g, double b) {
  y0 = std::max(0, y0);
  x0 = std::max(0, x0);
  y1 = std::min(img.height() - 1, y1);
  x1 = std::min(img.width() - 1, x1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
}

void draw_line(Image& img, double y0, double x0, double y1, double x1, double r, double g,
               double b) {
  const int steps = static_cast<int>(std::max(std::abs(y1 - y0), std::abs(x1 - x0))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    if (y < 0 || y >= img.height() || x < 0 || x >= img.width()) continue;
    img.at(y, x, 0) = r;
    img.at(y, x, 1) = g;
    img.at(y, x, 2) = b;
  }
}

void heat_color(double v, double& r, double& g, double& b) {
  v = std::clamp(v, 0.0, 1.0);  // 0 -> deep blue, 1 -> red
  r = v;
  g = 0.15 + 0.25 * (1.0 - std::abs(2.0 * v - 1.0));
  b = 1.0 - v;
}

Image heatmap_plot(const std::vector<std::vector<double>>& cells, int cell_px) {
  const int rows = static_cast<int>(cells.size());
  const int cols = static_cast<int>(cells[0].size());
  const int margin = 8;
  Image img(rows * cell_px + 2 * margin, cols * cell_px + 2 * margin, 1.0);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      double r, g, b;
      heat_color(cells[i][j], r, g, b);
      fill_rect(img, margin + i * cell_px, margin + j * cell_px, margin + (i + 1) * cell_px - 2,
                margin + (j + 1) * cell_px - 2, r, g, b);
    }
  return img;
}

Image curve_plot(const std::vector<std::vector<std::pair<double, double>>>& series, int h, int w) {
  Image img(h, w, 1.0);
  double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
  for (const auto& s : series)
    for (const auto& [x, y] : s) {
      x_lo = std::min(x_lo, x);
      x_hi = std::max(x_hi, x);
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  if (x_hi <= x_lo) x_hi = x_lo + 1;
  if (y_hi <= y_lo) y_hi = y_lo + 1;
  const int margin = 12;
  auto px = [&](double x) { return margin + (x - x_lo) / (x_hi - x_lo) * (w - 2 * margin); };
  auto py = [&](double y) { return h - margin - (y - y_lo) / (y_hi - y_lo) * (h - 2 * margin); };
  draw_line(img, h - margin, margin, h - margin, w - margin, 0.3, 0.3, 0.3);
  draw_line(img, margin, margin, h - margin, margin, 0.3, 0.3, 0.3);
  const double palette[3][3] = {{0.8, 0.2, 0.2}, {0.2, 0.4, 0.8}, {0.2, 0.6, 0.3}};
  for (size_t s = 0; s < series.size(); ++s) {
    const auto& col = palette[s % 3];
    for (size_t i = 0; i + 1 < series[s].size(); ++i)
      draw_line(img, py(series[s][i].second), px(series[s][i].first),
                py(series[s][i + 1].second), px(series[s][i + 1].first), col[0], col[1], col[2]);
  }
  return img;
}

Image scatter_plot(const std::vector<SentinetPoint>& points, int h, int w) {
  Image img(h, w, 1.0);
  const int margin = 12;
  draw_line(img, h - margin, margin, h - margin, w - margin, 0.3, 0.3, 0.3);
  draw_line(img, margin, margin, h - margin, margin, 0.3, 0.3, 0.3);
  for (const auto& p : points) {
    const int x = margin + static_cast<int>(p.avg_confidence * (w - 2 * margin - 1));
    const int y = h - margin - static_cast<int>(p.fooled_pct * (h - 2 * margin - 1));
    double r = 0.2, g = 0.5, b = 0.9;  // benign: blue
    if (p.kind == "patch") {
      r = 0.85, g = 0.2, b = 0.2;
    } else if (p.kind == "slap") {
      r = 0.2, g = 0.65, b = 0.25;
    }
    fill_rect(img, y - 2, x - 2, y + 2, x + 2, r, g, b);
    if (p.flagged) fill_rect(img, y - 1, x - 1, y + 1, x + 1, 0.0, 0.0, 0.0);
  }
  return img;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

std::string csv_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

void report(const ResultsBundle& bundle, const std::string& out_dir) {
  if (bundle.run_id.empty()) throw ConfigError("report needs a run_id");
  if (bundle.lux_sweep.empty()) throw ConfigError("report: lux sweep missing");
  if (bundle.cone.n_scenes == 0) throw ConfigError("report: cone breakdown missing");
  if (bundle.transfer.empty()) throw ConfigError("report: transfer matrix missing");
  if (bundle.feasibility_curve.empty()) throw ConfigError("report: feasibility curve missing");
  if (bundle.sentinet_points.empty()) throw ConfigError("report: sentinet points missing");

  const fs::path root = fs::path(out_dir) / bundle.run_id;
  const fs::path tables = root / "tables";
  const fs::path plots = root / "plots";
  fs::create_directories(tables);
  fs::create_directories(plots);
  std::vector<std::string> files;

  auto emit_json = [&](const std::string& name, const json& j) {
    write_text((tables / name).string(), j.dump(2) + "\n");
    files.push_back("tables/" + name);
  };
  auto emit_csv = [&](const std::string& name, const std::string& text) {
    write_text((tables / name).string(), text);
    files.push_back("tables/" + name);
  };
  auto emit_plot = [&](const std::string& name, const Image& img) {
    write_png(img, (plots / name).string());
    files.push_back("plots/" + name);
  };

  // lux sweep
  {
    json rows = json::array();
    std::string csv = "preset,fit_loss,final_loss,attack_success\n";
    for (const auto& r : bundle.lux_sweep) {
      rows.push_back({{"preset", r.preset},
                      {"fit_loss", r.fit_loss},
                      {"final_loss", r.final_loss},
                      {"attack_success", r.attack_success}});
      csv += r.preset + "," + csv_num(r.fit_loss) + "," + csv_num(r.final_loss) + "," +
             csv_num(r.attack_success) + "\n";
    }
    emit_json("lux_sweep.json", rows);
    emit_csv("lux_sweep.csv", csv);
    std::vector<std::pair<double, double>> success, loss;
    for (size_t i = 0; i < bundle.lux_sweep.size(); ++i) {
      success.emplace_back(static_cast<double>(i), bundle.lux_sweep[i].attack_success);
      loss.emplace_back(static_cast<double>(i), bundle.lux_sweep[i].final_loss);
    }
    emit_plot("lux_sweep.png", curve_plot({success, loss}, 240, 320));
  }

  // cone breakdown
  {
    json j;
    j["n_scenes"] = bundle.cone.n_scenes;
    j["success_rate"] = bundle.cone.success_rate;
    j["total"] = bundle.cone.total;
    j["succeeded"] = bundle.cone.succeeded;
    emit_json("cone.json", j);
    std::string csv = "angle_bin,size_bin,total,succeeded\n";
    std::vector<std::vector<double>> cells(attack::SuccessReport::kAngleBins,
                                           std::vector<double>(attack::SuccessReport::kSizeBins));
    for (int a = 0; a < attack::SuccessReport::kAngleBins; ++a)
      for (int s = 0; s < attack::SuccessReport::kSizeBins; ++s) {
        csv += std::to_string(a) + "," + std::to_string(s) + "," +
               std::to_string(bundle.cone.total[a][s]) + "," +
               std::to_string(bundle.cone.succeeded[a][s]) + "\n";
        cells[a][s] = bundle.cone.total[a][s] == 0
                          ? 0.0
                          : static_cast<double>(bundle.cone.succeeded[a][s]) /
                                bundle.cone.total[a][s];
      }
    emit_csv("cone.csv", csv);
    emit_plot("cone_heatmap.png", heatmap_plot(cells, 36));
  }

  // transfer matrix
  {
    json rows = json::array();
    std::string csv = "source,target,n_frames,success_rate\n";
    std::vector<std::vector<double>> cells;
    for (const auto& row : bundle.transfer) {
      std::vector<double> crow;
      for (const auto& cell : row) {
        rows.push_back({{"source", cell.source_model_id},
                        {"target", cell.target_model_id},
                        {"n_frames", cell.n_frames},
                        {"success_rate", cell.success_rate}});
        csv += cell.source_model_id + "," + cell.target_model_id + "," +
               std::to_string(cell.n_frames) + "," + csv_num(cell.success_rate) + "\n";
        crow.push_back(cell.success_rate);
      }
      cells.push_back(std::move(crow));
    }
    emit_json("transfer.json", rows);
    emit_csv("transfer.csv", csv);
    emit_plot("transfer_heatmap.png", heatmap_plot(cells, 48));
  }

  // feasibility curve
  {
    json rows = json::array();
    std::string csv = "distance_m,lux\n";
    for (const auto& [d, lux] : bundle.feasibility_curve) {
      rows.push_back({{"distance_m", d}, {"lux", lux}});
      csv += csv_num(d) + "," + csv_num(lux) + "\n";
    }
    emit_json("feasibility.json", rows);
    emit_csv("feasibility.csv", csv);
    emit_plot("feasibility_curve.png", curve_plot({bundle.feasibility_curve}, 240, 320));
  }

  // sentinet scatter
  {
    json rows = json::array();
    std::string csv = "kind,avg_confidence,fooled_pct,flagged\n";
    for (const auto& p : bundle.sentinet_points) {
      rows.push_back({{"kind", p.kind},
                      {"avg_confidence", p.avg_confidence},
                      {"fooled_pct", p.fooled_pct},
                      {"flagged", p.flagged}});
      csv += p.kind + "," + csv_num(p.avg_confidence) + "," + csv_num(p.fooled_pct) + "," +
             (p.flagged ? "1" : "0") + "\n";
    }
    emit_json("sentinet.json", rows);
    emit_csv("sentinet.csv", csv);
    emit_plot("sentinet_scatter.png", scatter_plot(bundle.sentinet_points, 240, 320));
  }

  std::sort(files.begin(), files.end());
  json manifest;
  manifest["run_id"] = bundle.run_id;
  manifest["seed"] = bundle.seed;
  manifest["generator"] = "slapforge 1.0";
  manifest["files"] = files;
  write_text((root / "manifest.json").string(), manifest.dump(2) + "\n");
}

}  // namespace slap::evalharness
