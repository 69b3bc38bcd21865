#include "slap/projmodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "slap/nn.hpp"

namespace slap::projmodel {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

ProjectionModel::ProjectionModel(int hidden_width, uint64_t seed) : hidden_(hidden_width) {
  if (hidden_width < 1) throw ConfigError("hidden_width must be >= 1");
  Rng rng(seed);
  auto init = [&](MatrixXd& m, long rows, long cols) {
    m.resize(rows, cols);
    const double std = std::sqrt(2.0 / static_cast<double>(cols));
    for (long j = 0; j < cols; ++j)
      for (long i = 0; i < rows; ++i) m(i, j) = rng.normal(0.0, std);
  };
  init(w1_, hidden_, 6);
  init(w2_, hidden_, hidden_);
  init(w3_, 3, hidden_);
  b1_ = VectorXd::Zero(hidden_);
  b2_ = VectorXd::Zero(hidden_);
  b3_ = VectorXd::Zero(3);
}

std::array<double, 3> ProjectionModel::forward_raw(const std::array<double, 3>& c_s,
                                                   const std::array<double, 3>& c_p,
                                                   VectorXd* a1_out, VectorXd* a2_out) const {
  VectorXd x(6);
  x << c_s[0], c_s[1], c_s[2], c_p[0], c_p[1], c_p[2];
  VectorXd a1 = (w1_ * x + b1_).cwiseMax(0.0);
  VectorXd a2 = (w2_ * a1 + b2_).cwiseMax(0.0);
  VectorXd y = w3_ * a2 + b3_;
  if (a1_out) *a1_out = std::move(a1);
  if (a2_out) *a2_out = std::move(a2);
  return {y[0], y[1], y[2]};
}

std::array<double, 3> ProjectionModel::predict(const std::array<double, 3>& c_s,
                                               const std::array<double, 3>& c_p) const {
  auto y = forward_raw(c_s, c_p, nullptr, nullptr);
  for (auto& v : y) v = std::clamp(v, 0.0, 1.0);
  return y;
}

Image ProjectionModel::predict_image(const Image& surface, const Image& projection) const {
  if (!surface.same_size(projection)) throw DimensionMismatch("surface vs projection");
  Image out(surface.height(), surface.width());
  for (int y = 0; y < surface.height(); ++y)
    for (int x = 0; x < surface.width(); ++x) {
      const auto o = predict({surface.at(y, x, 0), surface.at(y, x, 1), surface.at(y, x, 2)},
                             {projection.at(y, x, 0), projection.at(y, x, 1), projection.at(y, x, 2)});
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = o[c];
    }
  if (surface.has_alpha()) out.alpha_plane() = surface.alpha_plane();
  return out;
}

Image ProjectionModel::predict_image_traced(const Image& surface, const Image& projection,
                                            Tape& tape) const {
  if (!surface.same_size(projection)) throw DimensionMismatch("surface vs projection");
  const int h = surface.height(), w = surface.width();
  const long n = static_cast<long>(h) * w;
  tape.h = h;
  tape.w = w;
  tape.a1.resize(hidden_, n);
  tape.a2.resize(hidden_, n);
  tape.pre_clamp.resize(3, n);
  Image out(h, w);
  for (long i = 0; i < n; ++i) {
    VectorXd x(6);
    for (int c = 0; c < 3; ++c) x[c] = surface.data()[i * 3 + c];
    for (int c = 0; c < 3; ++c) x[3 + c] = projection.data()[i * 3 + c];
    tape.a1.col(i) = (w1_ * x + b1_).cwiseMax(0.0);
    tape.a2.col(i) = (w2_ * tape.a1.col(i) + b2_).cwiseMax(0.0);
    tape.pre_clamp.col(i) = w3_ * tape.a2.col(i) + b3_;
    for (int c = 0; c < 3; ++c) out.data()[i * 3 + c] = std::clamp(tape.pre_clamp(c, i), 0.0, 1.0);
  }
  if (surface.has_alpha()) out.alpha_plane() = surface.alpha_plane();
  return out;
}

Image ProjectionModel::predict_image_vjp(const Tape& tape, const Image& grad_out) const {
  if (grad_out.height() != tape.h || grad_out.width() != tape.w)
    throw DimensionMismatch("tape vs grad_out");
  Image grad(tape.h, tape.w);
  const long n = static_cast<long>(tape.h) * tape.w;
  for (long i = 0; i < n; ++i) {
    VectorXd gy(3);
    for (int c = 0; c < 3; ++c) {
      const double pre = tape.pre_clamp(c, i);
      gy[c] = (pre < 0.0 || pre > 1.0) ? 0.0 : grad_out.data()[i * 3 + c];
    }
    VectorXd g2 = w3_.transpose() * gy;
    g2 = (tape.a2.col(i).array() > 0.0).select(g2.array(), 0.0);
    VectorXd g1 = w2_.transpose() * g2;
    g1 = (tape.a1.col(i).array() > 0.0).select(g1.array(), 0.0);
    VectorXd gx = w1_.transpose() * g1;
    for (int c = 0; c < 3; ++c) grad.data()[i * 3 + c] = gx[3 + c];
  }
  return grad;
}

long ProjectionModel::param_count() const {
  return w1_.size() + w2_.size() + w3_.size() + b1_.size() + b2_.size() + b3_.size();
}

VectorXd ProjectionModel::flatten() const {
  VectorXd p(param_count());
  long off = 0;
  auto put = [&](const MatrixXd& m) {
    p.segment(off, m.size()) = Eigen::Map<const VectorXd>(m.data(), m.size());
    off += m.size();
  };
  put(w1_);
  put(b1_);
  put(w2_);
  put(b2_);
  put(w3_);
  put(b3_);
  return p;
}

void ProjectionModel::unflatten(const VectorXd& p) {
  long off = 0;
  auto take = [&](MatrixXd& m) {
    Eigen::Map<VectorXd>(m.data(), m.size()) = p.segment(off, m.size());
    off += m.size();
  };
  MatrixXd b1m = b1_, b2m = b2_, b3m = b3_;
  take(w1_);
  take(b1m);
  take(w2_);
  take(b2m);
  take(w3_);
  take(b3m);
  b1_ = b1m;
  b2_ = b2m;
  b3_ = b3m;
}

double ProjectionModel::loss_and_grad(const std::vector<ColorTriple>& triples,
                                      VectorXd* grad) const {
  MatrixXd gw1 = MatrixXd::Zero(w1_.rows(), w1_.cols());
  MatrixXd gw2 = MatrixXd::Zero(w2_.rows(), w2_.cols());
  MatrixXd gw3 = MatrixXd::Zero(w3_.rows(), w3_.cols());
  VectorXd gb1 = VectorXd::Zero(b1_.size());
  VectorXd gb2 = VectorXd::Zero(b2_.size());
  VectorXd gb3 = VectorXd::Zero(b3_.size());

  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(triples.size());
  for (const auto& t : triples) {
    VectorXd a1, a2;
    const auto y = forward_raw(t.c_s, t.c_p, &a1, &a2);
    VectorXd gy(3);
    for (int c = 0; c < 3; ++c) {
      const double diff = y[c] - t.c_o[c];
      loss += std::abs(diff) * inv_n;
      gy[c] = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) * inv_n;
    }
    if (!grad) continue;
    VectorXd x(6);
    x << t.c_s[0], t.c_s[1], t.c_s[2], t.c_p[0], t.c_p[1], t.c_p[2];
    gw3 += gy * a2.transpose();
    gb3 += gy;
    VectorXd g2 = w3_.transpose() * gy;
    g2 = (a2.array() > 0.0).select(g2.array(), 0.0);
    gw2 += g2 * a1.transpose();
    gb2 += g2;
    VectorXd g1 = w2_.transpose() * g2;
    g1 = (a1.array() > 0.0).select(g1.array(), 0.0);
    gw1 += g1 * x.transpose();
    gb1 += g1;
  }
  if (grad) {
    grad->resize(param_count());
    long off = 0;
    auto put = [&](const MatrixXd& m) {
      grad->segment(off, m.size()) = Eigen::Map<const VectorXd>(m.data(), m.size());
      off += m.size();
    };
    put(gw1);
    put(gb1);
    put(gw2);
    put(gb2);
    put(gw3);
    put(gb3);
  }
  return loss;
}

void ProjectionModel::save(const std::string& path) const {
  auto dump = [](const MatrixXd& m) {
    // row-major serialization
    std::vector<double> v;
    v.reserve(m.size());
    for (long i = 0; i < m.rows(); ++i)
      for (long j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
    return v;
  };
  json j;
  j["hidden_width"] = hidden_;
  j["layers"] = json::array({
      json{{"rows", w1_.rows()}, {"cols", w1_.cols()}, {"weights", dump(w1_)}, {"bias", dump(b1_)}},
      json{{"rows", w2_.rows()}, {"cols", w2_.cols()}, {"weights", dump(w2_)}, {"bias", dump(b2_)}},
      json{{"rows", w3_.rows()}, {"cols", w3_.cols()}, {"weights", dump(w3_)}, {"bias", dump(b3_)}},
  });
  std::ofstream out(path);
  if (!out) throw IoError("cannot write model to " + path);
  out << j.dump() << "\n";
}

ProjectionModel ProjectionModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read model from " + path);
  json j = json::parse(in);
  ProjectionModel m;
  m.hidden_ = j.at("hidden_width");
  auto parse = [](const json& lj, MatrixXd& w, VectorXd& b) {
    const long rows = lj.at("rows"), cols = lj.at("cols");
    const auto wv = lj.at("weights").get<std::vector<double>>();
    const auto bv = lj.at("bias").get<std::vector<double>>();
    if (static_cast<long>(wv.size()) != rows * cols || static_cast<long>(bv.size()) != rows)
      throw IoError("bad layer dimensions in checkpoint");
    w.resize(rows, cols);
    for (long i = 0; i < rows; ++i)
      for (long jx = 0; jx < cols; ++jx) w(i, jx) = wv[i * cols + jx];
    b = Eigen::Map<const VectorXd>(bv.data(), rows);
  };
  parse(j.at("layers")[0], m.w1_, m.b1_);
  parse(j.at("layers")[1], m.w2_, m.b2_);
  parse(j.at("layers")[2], m.w3_, m.b3_);
  return m;
}

namespace {

// Per-pixel median over a window of frames.
Image median_frames(const std::vector<const Image*>& frames) {
  Image out(frames[0]->height(), frames[0]->width());
  std::vector<double> vals(frames.size());
  for (size_t i = 0; i < out.data().size(); ++i) {
    for (size_t f = 0; f < frames.size(); ++f) vals[f] = frames[f]->data()[i];
    auto mid = vals.begin() + vals.size() / 2;
    std::nth_element(vals.begin(), mid, vals.end());
    double m = *mid;
    if (vals.size() % 2 == 0) {
      auto lo = std::max_element(vals.begin(), mid);
      m = (m + *lo) / 2.0;
    }
    out.data()[i] = m;
  }
  return out;
}

struct Run {
  bool projected;
  std::array<double, 3> color;
  size_t begin, end;  // [begin, end)
};

std::vector<Run> split_runs(const projsim::FrameSequence& seq) {
  std::vector<Run> runs;
  for (size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& a = seq.annotations[i];
    if (!runs.empty() && runs.back().projected == a.projected &&
        (!a.projected || runs.back().color == a.color) && runs.back().end == i) {
      runs.back().end = i + 1;
    } else {
      runs.push_back({a.projected, a.color, i, i + 1});
    }
  }
  return runs;
}

}  // namespace

Image extract_surface(const projsim::FrameSequence& seq) {
  for (const auto& run : split_runs(seq)) {
    if (run.projected || run.end - run.begin < 10) continue;
    std::vector<const Image*> window;
    for (size_t i = run.end - 10; i < run.end; ++i) window.push_back(&seq.frames[i]);
    return median_frames(window);
  }
  throw InsufficientFrames("no run of >= 10 consecutive no-projection frames");
}

std::vector<ColorTriple> extract_triples(const projsim::FrameSequence& seq, const Image& surface,
                                         int settle_frames) {
  // Group surface pixels by 8-bit-quantized color.
  std::map<std::array<int, 3>, std::vector<size_t>> masks;
  for (size_t px = 0; px < surface.pixels(); ++px) {
    std::array<int, 3> key;
    for (int c = 0; c < 3; ++c)
      key[c] = static_cast<int>(std::lround(std::clamp(surface.data()[px * 3 + c], 0.0, 1.0) * 255.0));
    masks[key].push_back(px);
  }

  std::vector<ColorTriple> triples;
  for (const auto& run : split_runs(seq)) {
    if (!run.projected) continue;
    const int n_frames = static_cast<int>(run.end - run.begin);
    if (settle_frames >= n_frames)
      throw InsufficientFrames("settle_frames >= frames held per color");
    std::vector<const Image*> window;
    for (size_t i = run.begin + settle_frames; i < run.end; ++i) window.push_back(&seq.frames[i]);
    const Image settled = median_frames(window);

    for (const auto& [key, pixels] : masks) {
      if (pixels.empty()) throw EmptyMask("unique surface color with no pixels");
      ColorTriple t;
      for (int c = 0; c < 3; ++c) t.c_s[c] = key[c] / 255.0;
      t.c_p = run.color;
      for (size_t px : pixels)
        for (int c = 0; c < 3; ++c) t.c_o[c] += settled.data()[px * 3 + c];
      for (int c = 0; c < 3; ++c) t.c_o[c] /= static_cast<double>(pixels.size());
      triples.push_back(t);
    }
  }
  return triples;
}

FitResult fit(const std::vector<ColorTriple>& triples, int hidden_width, int epochs, double lr,
              uint64_t seed) {
  if (triples.size() < 2) throw DegenerateData("need at least 2 triples");
  if (lr <= 0.0) throw ConfigError("lr must be > 0");
  const auto& first = triples.front();
  bool all_same = std::all_of(triples.begin(), triples.end(), [&](const ColorTriple& t) {
    return t.c_s == first.c_s && t.c_p == first.c_p && t.c_o == first.c_o;
  });
  if (all_same) throw DegenerateData("all triples identical");

  ProjectionModel model(hidden_width, seed);
  VectorXd params = model.flatten();
  nn::AdamVec opt(params.size(), lr);
  double loss = 0.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    VectorXd grad;
    loss = model.loss_and_grad(triples, &grad);
    // Cosine decay to 1% of the base rate; constant-rate Adam on an L1
    // objective stalls at an error floor comparable to the learning rate.
    const double lr_scale =
        0.01 + 0.99 * 0.5 * (1.0 + std::cos(M_PI * epoch / std::max(1, epochs - 1)));
    opt.step(params, grad, lr_scale);
    model.unflatten(params);
  }
  loss = model.loss_and_grad(triples, nullptr);
  return {std::move(model), loss};
}

void save_triples_csv(const std::vector<ColorTriple>& triples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write triples to " + path);
  out << "cs_r,cs_g,cs_b,cp_r,cp_g,cp_b,co_r,co_g,co_b\n";
  out.precision(17);
  for (const auto& t : triples) {
    out << t.c_s[0] << ',' << t.c_s[1] << ',' << t.c_s[2] << ',' << t.c_p[0] << ',' << t.c_p[1]
        << ',' << t.c_p[2] << ',' << t.c_o[0] << ',' << t.c_o[1] << ',' << t.c_o[2] << "\n";
  }
}

std::vector<ColorTriple> load_triples_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read triples from " + path);
  std::string line;
  std::getline(in, line);  // header
  std::vector<ColorTriple> triples;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    double v[9];
    for (int i = 0; i < 9; ++i) {
      if (!std::getline(ss, field, ',')) throw IoError("short row in " + path);
      v[i] = std::stod(field);
    }
    triples.push_back({{v[0], v[1], v[2]}, {v[3], v[4], v[5]}, {v[6], v[7], v[8]}});
  }
  return triples;
}

}  // namespace slap::projmodel
