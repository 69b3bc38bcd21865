#pragma once

#include <Eigen/Core>
#include <array>
#include <string>
#include <vector>

#include "slap/image.hpp"
#include "slap/projsim.hpp"

namespace slap::projmodel {

/// One (surface color, projected color, observed color) training sample.
struct ColorTriple {
  std::array<double, 3> c_s{};
  std::array<double, 3> c_p{};
  std::array<double, 3> c_o{};
};

/// Two-hidden-layer ReLU network mapping (c_s ++ c_p) -> c_o, with a
/// clamp-to-[0,1] at inference and exact derivatives with respect to c_p.
class ProjectionModel {
 public:
  ProjectionModel() = default;
  ProjectionModel(int hidden_width, uint64_t seed);

  int hidden_width() const { return hidden_; }

  std::array<double, 3> predict(const std::array<double, 3>& c_s,
                                const std::array<double, 3>& c_p) const;

  /// Applies predict per pixel, pairing surface and projection.
  Image predict_image(const Image& surface, const Image& projection) const;

  /// Traced variant keeping hidden activations so gradients with respect to
  /// the projection can be pulled back afterwards.
  struct Tape {
    int h = 0, w = 0;
    Eigen::MatrixXd a1, a2;       // hidden activations, one column per pixel
    Eigen::MatrixXd pre_clamp;    // raw outputs, one column per pixel
  };
  Image predict_image_traced(const Image& surface, const Image& projection, Tape& tape) const;
  /// VJP: gradient of a scalar with respect to the projection image, given
  /// its gradient with respect to the (clamped) output image.
  Image predict_image_vjp(const Tape& tape, const Image& grad_out) const;

  void save(const std::string& path) const;
  static ProjectionModel load(const std::string& path);

  // Exposed for the fitter.
  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& p);
  long param_count() const;
  /// Mean per-triple channel-summed L1 loss and its parameter gradient.
  double loss_and_grad(const std::vector<ColorTriple>& triples, Eigen::VectorXd* grad) const;

 private:
  std::array<double, 3> forward_raw(const std::array<double, 3>& c_s,
                                    const std::array<double, 3>& c_p, Eigen::VectorXd* a1,
                                    Eigen::VectorXd* a2) const;

  int hidden_ = 0;
  Eigen::MatrixXd w1_, w2_, w3_;
  Eigen::VectorXd b1_, b2_, b3_;
};

/// Per-pixel median over the first settled run of >= 10 no-projection frames.
Image extract_surface(const projsim::FrameSequence& seq);

/// Mask-based triple extraction: per projected color, median the settled
/// frames, group surface pixels by 8-bit-quantized color, average per group.
std::vector<ColorTriple> extract_triples(const projsim::FrameSequence& seq, const Image& surface,
                                         int settle_frames);

struct FitResult {
  ProjectionModel model;
  double final_loss = 0.0;
};

FitResult fit(const std::vector<ColorTriple>& triples, int hidden_width = 32, int epochs = 2000,
              double lr = 1e-2, uint64_t seed = 0);

void save_triples_csv(const std::vector<ColorTriple>& triples, const std::string& path);
std::vector<ColorTriple> load_triples_csv(const std::string& path);

}  // namespace slap::projmodel
