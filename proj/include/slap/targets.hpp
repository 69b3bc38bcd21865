#pragma once

#include <optional>
#include <string>
#include <vector>

#include "slap/augment.hpp"
#include "slap/image.hpp"
#include "slap/nn.hpp"

namespace slap::targets {

using nn::Vec;

/// Image (32x32 or 104x104) flattened channel-major for the network stack.
Vec image_to_input(const Image& img);
Image input_grad_to_image(const Vec& grad, int h, int w);

struct FgsmConfig {
  double weight = 0.2;
  double step = 0.2;
};

/// Softmax classifier over 32x32 sign crops. Two architectures ship: "deep"
/// (two conv blocks) and "shallow" (one conv block), differing in parameter
/// count by well over 2x.
class Classifier {
 public:
  Classifier() = default;
  Classifier(const std::string& arch, int n_classes, uint64_t seed);

  const std::string& arch() const { return arch_; }
  int n_classes() const { return n_classes_; }
  double detection_threshold = 0.5;

  Vec logits(const Image& img) const;
  Vec probabilities(const Image& img) const;
  Vec logits_traced(const Image& img, nn::Network::Trace& trace) const;
  /// Pulls a gradient with respect to the logits back to the input image.
  Image input_vjp(const nn::Network::Trace& trace, const Vec& grad_logits) const;

  nn::Network& network() { return net_; }
  const nn::Network& network() const { return net_; }
  long parameter_count() const { return net_.parameter_count(); }

  void save(const std::string& path) const;
  static Classifier load(const std::string& path);

 private:
  std::string arch_;
  int n_classes_ = 0;
  nn::Network net_;
};

Classifier train_classifier(const std::vector<augment::LabeledImage>& dataset,
                            const std::string& arch, int epochs, double lr, uint64_t seed,
                            const std::optional<FgsmConfig>& adversarial = std::nullopt);

double accuracy(const Classifier& model, const std::vector<augment::LabeledImage>& dataset);

struct Detection {
  std::array<double, 4> box{};  // (x, y, w, h) normalized
  int class_id = 0;
  double score = 0.0;
};

/// Miniature single-shot detector: 104x104 input, 13x13 cell grid, one
/// predictor per cell emitting box offsets, objectness, and class logits.
class Detector {
 public:
  Detector() = default;
  Detector(int n_classes, uint64_t seed);

  int grid() const { return kGrid; }
  int n_classes() const { return n_classes_; }
  double detection_threshold = 0.4;
  double nms_iou = 0.1;

  nn::Network& network() { return net_; }
  const nn::Network& network() const { return net_; }
  long parameter_count() const { return net_.parameter_count(); }

  void save(const std::string& path) const;
  static Detector load(const std::string& path);

  static constexpr int kGrid = 13;
  static constexpr int kInput = 104;

 private:
  int n_classes_ = 0;
  nn::Network net_;
};

/// Thresholded detections after per-class greedy NMS.
std::vector<Detection> detect(const Detector& model, const Image& img);

/// Pre-suppression per-cell scores for one class: sigmoid(objectness) times
/// the cell's softmax class probability. Length grid^2.
Vec raw_scores(const Detector& model, const Image& img, int class_id);

struct DetectorTape {
  nn::Network::Trace trace;
  Vec out;  // raw network output
  int class_id = 0;
};
Vec raw_scores_traced(const Detector& model, const Image& img, int class_id, DetectorTape& tape);
/// Gradient of a scalar with respect to the input image, given its gradient
/// with respect to the raw per-cell scores.
Image raw_scores_vjp(const Detector& model, const DetectorTape& tape, const Vec& grad_scores);

Detector train_detector(const std::vector<augment::DetectorExample>& dataset, int n_classes,
                        int epochs, double lr, uint64_t seed);

double iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

}  // namespace slap::targets
