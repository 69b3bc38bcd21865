#pragma once

#include <Eigen/Core>
#include <memory>
#include <string>
#include <vector>

#include "slap/rng.hpp"

namespace slap::nn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

struct Shape {
  int c = 0, h = 0, w = 0;
  int size() const { return c * h * w; }
};

struct LayerCache {
  virtual ~LayerCache() = default;
};

/// Single-sample forward/backward layer. Parameters live in a flat vector so
/// the optimizer and serialization stay layer-agnostic. Forward is pure given
/// the per-call cache, so inference is safe to run from many threads.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Shape out_shape(const Shape& in) const = 0;
  virtual Vec forward(const Vec& x, const Shape& in, std::unique_ptr<LayerCache>* cache) const = 0;
  /// Returns the gradient with respect to the input; accumulates parameter
  /// gradients into `param_grad` when non-null.
  virtual Vec backward(const Vec& gy, const Shape& in, const LayerCache& cache,
                       Vec* param_grad) const = 0;

  Vec& params() { return params_; }
  const Vec& params() const { return params_; }
  virtual std::string kind() const = 0;
  virtual void describe(std::vector<int>& spec) const = 0;

 protected:
  Vec params_;
};

std::unique_ptr<Layer> make_conv(int in_c, int out_c, int ksize, int stride = 1, int pad = 0);
std::unique_ptr<Layer> make_relu();
std::unique_ptr<Layer> make_maxpool2();
std::unique_ptr<Layer> make_dense(int in_dim, int out_dim);
std::unique_ptr<Layer> layer_from_spec(const std::string& kind, const std::vector<int>& spec);

/// Feed-forward stack with seeded He initialization.
class Network {
 public:
  Network() = default;
  Network(Shape input, std::vector<std::unique_ptr<Layer>> layers);
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;
  Network clone() const;

  void init(Rng& rng);

  Vec forward(const Vec& x) const;
  struct Trace {
    std::vector<Vec> inputs;  // input to each layer
    std::vector<std::unique_ptr<LayerCache>> caches;
  };
  Vec forward_traced(const Vec& x, Trace& trace) const;
  /// Backprop; parameter gradients are accumulated into `param_grads`
  /// (one vector per layer, same sizes as params) when non-null.
  Vec backward(const Vec& gy, const Trace& trace, std::vector<Vec>* param_grads) const;

  std::vector<Vec> zero_param_grads() const;
  size_t n_layers() const { return layers_.size(); }
  Layer& layer(size_t i) { return *layers_[i]; }
  const Layer& layer(size_t i) const { return *layers_[i]; }
  Shape input_shape() const { return input_; }
  Shape output_shape() const;
  long parameter_count() const;

  void save(const std::string& path) const;
  static Network load(const std::string& path);
  /// JSON text form, for embedding in larger checkpoint files.
  std::string serialize() const;
  static Network deserialize(const std::string& text);

 private:
  Shape input_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<Shape> layer_inputs_;  // shape entering each layer
};

/// Adam over the networks' per-layer parameter vectors.
class Adam {
 public:
  Adam(Network& net, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(const std::vector<Vec>& param_grads);

 private:
  Network* net_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Vec> m_, v_;
};

/// Adam state for a single flat parameter vector.
class AdamVec {
 public:
  AdamVec(long dim, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(Vec::Zero(dim)), v_(Vec::Zero(dim)) {}
  void step(Vec& params, const Vec& grad, double lr_scale = 1.0);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  Vec m_, v_;
};

/// Softmax with numerically stable log-sum-exp.
Vec softmax(const Vec& logits);
/// Cross-entropy of softmax(logits) against a class index; gy is the gradient
/// with respect to the logits.
double softmax_cross_entropy(const Vec& logits, int label, Vec* gy);

}  // namespace slap::nn
