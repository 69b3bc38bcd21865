#include "slap/targets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "slap/rng.hpp"

namespace slap::targets {

using nlohmann::json;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

nn::Network build_classifier_net(const std::string& arch, int n_classes) {
  std::vector<std::unique_ptr<nn::Layer>> layers;
  if (arch == "deep") {
    layers.push_back(nn::make_conv(3, 8, 3, 1, 1));
    layers.push_back(nn::make_relu());
    layers.push_back(nn::make_maxpool2());
    layers.push_back(nn::make_conv(8, 16, 3, 1, 1));
    layers.push_back(nn::make_relu());
    layers.push_back(nn::make_maxpool2());
    layers.push_back(nn::make_dense(16 * 8 * 8, 32));
    layers.push_back(nn::make_relu());
    layers.push_back(nn::make_dense(32, n_classes));
  } else if (arch == "shallow") {
    layers.push_back(nn::make_conv(3, 6, 5, 1, 2));
    layers.push_back(nn::make_relu());
    layers.push_back(nn::make_maxpool2());
    layers.push_back(nn::make_dense(6 * 16 * 16, 8));
    layers.push_back(nn::make_relu());
    layers.push_back(nn::make_dense(8, n_classes));
  } else {
    throw ConfigError("unknown classifier arch: " + arch);
  }
  return nn::Network(nn::Shape{3, 32, 32}, std::move(layers));
}

nn::Network build_detector_net(int n_classes) {
  std::vector<std::unique_ptr<nn::Layer>> layers;
  layers.push_back(nn::make_conv(3, 8, 3, 1, 1));
  layers.push_back(nn::make_relu());
  layers.push_back(nn::make_maxpool2());
  layers.push_back(nn::make_conv(8, 16, 3, 1, 1));
  layers.push_back(nn::make_relu());
  layers.push_back(nn::make_maxpool2());
  layers.push_back(nn::make_conv(16, 32, 3, 1, 1));
  layers.push_back(nn::make_relu());
  layers.push_back(nn::make_maxpool2());
  layers.push_back(nn::make_conv(32, 5 + n_classes, 1, 1, 0));
  return nn::Network(nn::Shape{3, Detector::kInput, Detector::kInput}, std::move(layers));
}

}  // namespace

Vec image_to_input(const Image& img) {
  const int h = img.height(), w = img.width();
  Vec v(3 * h * w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) v[(static_cast<long>(c) * h + y) * w + x] = img.at(y, x, c);
  return v;
}

Image input_grad_to_image(const Vec& grad, int h, int w) {
  Image img(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img.at(y, x, c) = grad[(static_cast<long>(c) * h + y) * w + x];
  return img;
}

Classifier::Classifier(const std::string& arch, int n_classes, uint64_t seed)
    : arch_(arch), n_classes_(n_classes), net_(build_classifier_net(arch, n_classes)) {
  Rng rng(seed);
  net_.init(rng);
}

Vec Classifier::logits(const Image& img) const {
  if (img.height() != 32 || img.width() != 32) throw DimensionMismatch("classifier wants 32x32");
  return net_.forward(image_to_input(img));
}

Vec Classifier::probabilities(const Image& img) const { return nn::softmax(logits(img)); }

Vec Classifier::logits_traced(const Image& img, nn::Network::Trace& trace) const {
  if (img.height() != 32 || img.width() != 32) throw DimensionMismatch("classifier wants 32x32");
  return net_.forward_traced(image_to_input(img), trace);
}

Image Classifier::input_vjp(const nn::Network::Trace& trace, const Vec& grad_logits) const {
  Vec g = net_.backward(grad_logits, trace, nullptr);
  return input_grad_to_image(g, 32, 32);
}

void Classifier::save(const std::string& path) const {
  json j;
  j["kind"] = "classifier";
  j["arch"] = arch_;
  j["classes"] = n_classes_;
  j["threshold"] = detection_threshold;
  j["network"] = json::parse(net_.serialize());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write classifier to " + path);
  out << j.dump() << "\n";
}

Classifier Classifier::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read classifier from " + path);
  json j = json::parse(in);
  Classifier c;
  c.arch_ = j.at("arch");
  c.n_classes_ = j.at("classes");
  c.detection_threshold = j.at("threshold");
  c.net_ = nn::Network::deserialize(j.at("network").dump());
  return c;
}

Classifier train_classifier(const std::vector<augment::LabeledImage>& dataset,
                            const std::string& arch, int epochs, double lr, uint64_t seed,
                            const std::optional<FgsmConfig>& adversarial) {
  std::set<int> labels;
  for (const auto& d : dataset) labels.insert(d.label);
  if (labels.size() < 2) throw DegenerateDataset("need at least 2 classes");
  const int n_classes = *labels.rbegin() + 1;

  Classifier model(arch, n_classes, seed);
  nn::Adam opt(model.network(), lr);
  Rng rng(seed ^ 0x747261696eULL);

  std::vector<Vec> inputs;
  inputs.reserve(dataset.size());
  for (const auto& d : dataset) inputs.push_back(image_to_input(d.image));

  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  const int batch = 32;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (size_t start = 0; start < order.size(); start += batch) {
      auto grads = model.network().zero_param_grads();
      const size_t end = std::min(order.size(), start + batch);
      for (size_t k = start; k < end; ++k) {
        const size_t i = order[k];
        nn::Network::Trace trace;
        Vec out = model.network().forward_traced(inputs[i], trace);
        Vec gy;
        nn::softmax_cross_entropy(out, dataset[i].label, &gy);
        Vec gin = model.network().backward(gy, trace, &grads);
        if (adversarial) {
          Vec adv = inputs[i];
          for (long j = 0; j < adv.size(); ++j)
            adv[j] = std::clamp(adv[j] + adversarial->step * (gin[j] > 0 ? 1.0 : gin[j] < 0 ? -1.0 : 0.0),
                                0.0, 1.0);
          nn::Network::Trace tr2;
          Vec out2 = model.network().forward_traced(adv, tr2);
          Vec gy2;
          nn::softmax_cross_entropy(out2, dataset[i].label, &gy2);
          gy2 *= adversarial->weight;
          model.network().backward(gy2, tr2, &grads);
        }
      }
      const double scale = 1.0 / static_cast<double>(end - start);
      for (auto& g : grads) g *= scale;
      opt.step(grads);
    }
  }
  return model;
}

double accuracy(const Classifier& model, const std::vector<augment::LabeledImage>& dataset) {
  if (dataset.empty()) throw DegenerateDataset("empty dataset");
  int correct = 0;
  for (const auto& d : dataset) {
    Vec p = model.probabilities(d.image);
    int best = 0;
    for (long i = 1; i < p.size(); ++i)
      if (p[i] > p[best]) best = static_cast<int>(i);
    if (best == d.label) ++correct;
  }
  return static_cast<double>(correct) / dataset.size();
}

Detector::Detector(int n_classes, uint64_t seed)
    : n_classes_(n_classes), net_(build_detector_net(n_classes)) {
  Rng rng(seed);
  net_.init(rng);
}

void Detector::save(const std::string& path) const {
  json j;
  j["kind"] = "detector";
  j["classes"] = n_classes_;
  j["threshold"] = detection_threshold;
  j["nms_iou"] = nms_iou;
  j["network"] = json::parse(net_.serialize());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write detector to " + path);
  out << j.dump() << "\n";
}

Detector Detector::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read detector from " + path);
  json j = json::parse(in);
  Detector d;
  d.n_classes_ = j.at("classes");
  d.detection_threshold = j.at("threshold");
  d.nms_iou = j.at("nms_iou");
  d.net_ = nn::Network::deserialize(j.at("network").dump());
  return d;
}

double iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double x0 = std::max(a[0], b[0]);
  const double y0 = std::max(a[1], b[1]);
  const double x1 = std::min(a[0] + a[2], b[0] + b[2]);
  const double y1 = std::min(a[1] + a[3], b[1] + b[3]);
  const double inter = std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0);
  const double uni = a[2] * a[3] + b[2] * b[3] - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

std::vector<Detection> detect(const Detector& model, const Image& img) {
  if (img.height() != Detector::kInput || img.width() != Detector::kInput)
    throw DimensionMismatch("detector wants 104x104");
  const int g = model.grid();
  const int cells = g * g;
  const int nc = model.n_classes();
  Vec out = model.network().forward(image_to_input(img));

  std::vector<Detection> candidates;
  for (int cell = 0; cell < cells; ++cell) {
    const int cy = cell / g, cx = cell % g;
    const double obj = sigmoid(out[4 * cells + cell]);
    Vec cls(nc);
    for (int c = 0; c < nc; ++c) cls[c] = out[(5 + c) * cells + cell];
    Vec p = nn::softmax(cls);
    int best = 0;
    for (int c = 1; c < nc; ++c)
      if (p[c] > p[best]) best = c;
    const double score = obj * p[best];
    if (score <= model.detection_threshold) continue;
    const double bx = (cx + sigmoid(out[0 * cells + cell])) / g;
    const double by = (cy + sigmoid(out[1 * cells + cell])) / g;
    const double bw = sigmoid(out[2 * cells + cell]);
    const double bh = sigmoid(out[3 * cells + cell]);
    Detection d;
    d.box = {std::clamp(bx - bw / 2, 0.0, 1.0), std::clamp(by - bh / 2, 0.0, 1.0), bw, bh};
    d.class_id = best;
    d.score = score;
    candidates.push_back(d);
  }

  std::sort(candidates.begin(), candidates.end(),
            [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& c : candidates) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.class_id == c.class_id && iou(k.box, c.box) >= model.nms_iou) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

Vec raw_scores(const Detector& model, const Image& img, int class_id) {
  DetectorTape tape;
  return raw_scores_traced(model, img, class_id, tape);
}

Vec raw_scores_traced(const Detector& model, const Image& img, int class_id, DetectorTape& tape) {
  if (img.height() != Detector::kInput || img.width() != Detector::kInput)
    throw DimensionMismatch("detector wants 104x104");
  if (class_id < 0 || class_id >= model.n_classes()) throw ConfigError("bad class id");
  const int g = model.grid();
  const int cells = g * g;
  const int nc = model.n_classes();
  tape.class_id = class_id;
  tape.out = model.network().forward_traced(image_to_input(img), tape.trace);
  Vec scores(cells);
  for (int cell = 0; cell < cells; ++cell) {
    const double obj = sigmoid(tape.out[4 * cells + cell]);
    Vec cls(nc);
    for (int c = 0; c < nc; ++c) cls[c] = tape.out[(5 + c) * cells + cell];
    scores[cell] = obj * nn::softmax(cls)[class_id];
  }
  return scores;
}

Image raw_scores_vjp(const Detector& model, const DetectorTape& tape, const Vec& grad_scores) {
  const int g = model.grid();
  const int cells = g * g;
  const int nc = model.n_classes();
  Vec gout = Vec::Zero(tape.out.size());
  for (int cell = 0; cell < cells; ++cell) {
    const double gs = grad_scores[cell];
    if (gs == 0.0) continue;
    const double obj = sigmoid(tape.out[4 * cells + cell]);
    Vec cls(nc);
    for (int c = 0; c < nc; ++c) cls[c] = tape.out[(5 + c) * cells + cell];
    Vec p = nn::softmax(cls);
    const double pk = p[tape.class_id];
    gout[4 * cells + cell] = gs * pk * obj * (1.0 - obj);
    for (int c = 0; c < nc; ++c) {
      const double dp = pk * ((c == tape.class_id ? 1.0 : 0.0) - p[c]);
      gout[(5 + c) * cells + cell] = gs * obj * dp;
    }
  }
  Vec gin = model.network().backward(gout, tape.trace, nullptr);
  return input_grad_to_image(gin, Detector::kInput, Detector::kInput);
}

Detector train_detector(const std::vector<augment::DetectorExample>& dataset, int n_classes,
                        int epochs, double lr, uint64_t seed) {
  bool any_sign = false, any_empty = false;
  for (const auto& d : dataset) (d.has_sign ? any_sign : any_empty) = true;
  if (dataset.empty() || !any_sign) throw DegenerateDataset("detector needs sign examples");

  Detector model(n_classes, seed);
  nn::Adam opt(model.network(), lr);
  Rng rng(seed ^ 0x646574ULL);
  const int g = model.grid();
  const int cells = g * g;

  std::vector<Vec> inputs;
  inputs.reserve(dataset.size());
  for (const auto& d : dataset) inputs.push_back(image_to_input(d.image));

  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  const int batch = 16;
  // the single positive cell must outweigh the 168 negatives
  const double obj_weight = 8.0;
  const double noobj_weight = 0.2;
  const double box_weight = 5.0;
  // the corpus contains a deliberately confusable class pair, so per-cell
  // classification needs more pull than the default CE
  const double class_weight = 6.0;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (size_t start = 0; start < order.size(); start += batch) {
      auto grads = model.network().zero_param_grads();
      const size_t end = std::min(order.size(), start + batch);
      for (size_t k = start; k < end; ++k) {
        const size_t i = order[k];
        const auto& ex = dataset[i];
        nn::Network::Trace trace;
        Vec out = model.network().forward_traced(inputs[i], trace);
        Vec gout = Vec::Zero(out.size());

        int responsible = -1;
        if (ex.has_sign) {
          const double cx = ex.box[0] + ex.box[2] / 2;
          const double cy = ex.box[1] + ex.box[3] / 2;
          const int gx = std::min(g - 1, static_cast<int>(cx * g));
          const int gy = std::min(g - 1, static_cast<int>(cy * g));
          responsible = gy * g + gx;

          // box regression on sigmoid-decoded offsets
          const double fx = cx * g - gx, fy = cy * g - gy;
          const double t[4] = {fx, fy, ex.box[2], ex.box[3]};
          for (int j = 0; j < 4; ++j) {
            const double s = sigmoid(out[j * cells + responsible]);
            gout[j * cells + responsible] = box_weight * 2.0 * (s - t[j]) * s * (1.0 - s);
          }
          // class cross-entropy at the responsible cell
          Vec cls(n_classes);
          for (int c = 0; c < n_classes; ++c) cls[c] = out[(5 + c) * cells + responsible];
          Vec gcls;
          nn::softmax_cross_entropy(cls, ex.label, &gcls);
          for (int c = 0; c < n_classes; ++c)
            gout[(5 + c) * cells + responsible] = class_weight * gcls[c];
        }
        // objectness: BCE toward 1 at the responsible cell, 0 elsewhere
        for (int cell = 0; cell < cells; ++cell) {
          const double s = sigmoid(out[4 * cells + cell]);
          if (cell == responsible)
            gout[4 * cells + cell] = obj_weight * (s - 1.0);
          else
            gout[4 * cells + cell] = noobj_weight * s;
        }
        model.network().backward(gout, trace, &grads);
      }
      const double scale = 1.0 / static_cast<double>(end - start);
      for (auto& gr : grads) gr *= scale;
      opt.step(grads);
    }
  }
  return model;
}

}  // namespace slap::targets
