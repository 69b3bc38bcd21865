#include "slap/nn.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "slap/errors.hpp"

namespace slap::nn {

using nlohmann::json;

namespace {

struct ConvCache : LayerCache {
  Mat cols;  // (out_h*out_w) x (k*k*in_c)
};

class Conv final : public Layer {
 public:
  Conv(int in_c, int out_c, int ksize, int stride, int pad)
      : in_c_(in_c), out_c_(out_c), k_(ksize), stride_(stride), pad_(pad) {
    params_ = Vec::Zero(static_cast<long>(k_) * k_ * in_c_ * out_c_ + out_c_);
  }

  Shape out_shape(const Shape& in) const override {
    return {out_c_, (in.h + 2 * pad_ - k_) / stride_ + 1, (in.w + 2 * pad_ - k_) / stride_ + 1};
  }

  Vec forward(const Vec& x, const Shape& in, std::unique_ptr<LayerCache>* cache) const override {
    const Shape out = out_shape(in);
    Mat cols = im2col(x, in, out);
    const long wrows = static_cast<long>(k_) * k_ * in_c_;
    Eigen::Map<const Mat> weights(params_.data(), wrows, out_c_);
    Eigen::Map<const Vec> bias(params_.data() + wrows * out_c_, out_c_);
    Mat y = cols * weights;             // (oh*ow) x out_c
    y.rowwise() += bias.transpose();
    if (cache) {
      auto c = std::make_unique<ConvCache>();
      c->cols = std::move(cols);
      *cache = std::move(c);
    }
    // layout: channel-major (c, h, w)
    Vec out_v(out.size());
    const long hw = static_cast<long>(out.h) * out.w;
    for (int c = 0; c < out_c_; ++c) out_v.segment(c * hw, hw) = y.col(c);
    return out_v;
  }

  Vec backward(const Vec& gy, const Shape& in, const LayerCache& cache, Vec* param_grad) const override {
    const Shape out = out_shape(in);
    const auto& cc = static_cast<const ConvCache&>(cache);
    const long hw = static_cast<long>(out.h) * out.w;
    Mat gy_m(hw, out_c_);
    for (int c = 0; c < out_c_; ++c) gy_m.col(c) = gy.segment(c * hw, hw);

    const long wrows = static_cast<long>(k_) * k_ * in_c_;
    if (param_grad) {
      Eigen::Map<Mat> gw(param_grad->data(), wrows, out_c_);
      gw.noalias() += cc.cols.transpose() * gy_m;
      Eigen::Map<Vec> gb(param_grad->data() + wrows * out_c_, out_c_);
      gb += gy_m.colwise().sum().transpose();
    }

    Eigen::Map<const Mat> weights(params_.data(), wrows, out_c_);
    Mat gcols = gy_m * weights.transpose();  // (oh*ow) x (k*k*in_c)
    return col2im(gcols, in, out);
  }

  std::string kind() const override { return "conv"; }
  void describe(std::vector<int>& spec) const override { spec = {in_c_, out_c_, k_, stride_, pad_}; }

 private:
  Mat im2col(const Vec& x, const Shape& in, const Shape& out) const {
    Mat cols = Mat::Zero(static_cast<long>(out.h) * out.w, static_cast<long>(k_) * k_ * in_c_);
    for (int oy = 0; oy < out.h; ++oy)
      for (int ox = 0; ox < out.w; ++ox) {
        const long row = static_cast<long>(oy) * out.w + ox;
        long col = 0;
        for (int c = 0; c < in_c_; ++c)
          for (int ky = 0; ky < k_; ++ky)
            for (int kx = 0; kx < k_; ++kx, ++col) {
              const int iy = oy * stride_ + ky - pad_;
              const int ix = ox * stride_ + kx - pad_;
              if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
              cols(row, col) = x[(static_cast<long>(c) * in.h + iy) * in.w + ix];
            }
      }
    return cols;
  }

  Vec col2im(const Mat& gcols, const Shape& in, const Shape& out) const {
    Vec gx = Vec::Zero(in.size());
    for (int oy = 0; oy < out.h; ++oy)
      for (int ox = 0; ox < out.w; ++ox) {
        const long row = static_cast<long>(oy) * out.w + ox;
        long col = 0;
        for (int c = 0; c < in_c_; ++c)
          for (int ky = 0; ky < k_; ++ky)
            for (int kx = 0; kx < k_; ++kx, ++col) {
              const int iy = oy * stride_ + ky - pad_;
              const int ix = ox * stride_ + kx - pad_;
              if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
              gx[(static_cast<long>(c) * in.h + iy) * in.w + ix] += gcols(row, col);
            }
      }
    return gx;
  }

  int in_c_, out_c_, k_, stride_, pad_;
};

struct ReluCache : LayerCache {
  Vec x;
};

class Relu final : public Layer {
 public:
  Relu() { params_ = Vec::Zero(0); }
  Shape out_shape(const Shape& in) const override { return in; }
  Vec forward(const Vec& x, const Shape&, std::unique_ptr<LayerCache>* cache) const override {
    if (cache) {
      auto c = std::make_unique<ReluCache>();
      c->x = x;
      *cache = std::move(c);
    }
    return x.cwiseMax(0.0);
  }
  Vec backward(const Vec& gy, const Shape&, const LayerCache& cache, Vec*) const override {
    const auto& rc = static_cast<const ReluCache&>(cache);
    return (rc.x.array() > 0.0).select(gy.array(), 0.0);
  }
  std::string kind() const override { return "relu"; }
  void describe(std::vector<int>& spec) const override { spec.clear(); }
};

struct PoolCache : LayerCache {
  std::vector<int> argmax;
};

class MaxPool2 final : public Layer {
 public:
  MaxPool2() { params_ = Vec::Zero(0); }
  Shape out_shape(const Shape& in) const override { return {in.c, in.h / 2, in.w / 2}; }
  Vec forward(const Vec& x, const Shape& in, std::unique_ptr<LayerCache>* cache) const override {
    const Shape out = out_shape(in);
    Vec y(out.size());
    std::vector<int> argmax(cache ? out.size() : 0);
    for (int c = 0; c < in.c; ++c)
      for (int oy = 0; oy < out.h; ++oy)
        for (int ox = 0; ox < out.w; ++ox) {
          double best = -1e300;
          int best_i = -1;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int i = (c * in.h + oy * 2 + dy) * in.w + ox * 2 + dx;
              if (x[i] > best) {
                best = x[i];
                best_i = i;
              }
            }
          const int o = (c * out.h + oy) * out.w + ox;
          y[o] = best;
          if (cache) argmax[o] = best_i;
        }
    if (cache) {
      auto pc = std::make_unique<PoolCache>();
      pc->argmax = std::move(argmax);
      *cache = std::move(pc);
    }
    return y;
  }
  Vec backward(const Vec& gy, const Shape& in, const LayerCache& cache, Vec*) const override {
    const auto& pc = static_cast<const PoolCache&>(cache);
    Vec gx = Vec::Zero(in.size());
    for (long o = 0; o < gy.size(); ++o) gx[pc.argmax[o]] += gy[o];
    return gx;
  }
  std::string kind() const override { return "maxpool2"; }
  void describe(std::vector<int>& spec) const override { spec.clear(); }
};

struct DenseCache : LayerCache {
  Vec x;
};

class Dense final : public Layer {
 public:
  Dense(int in_dim, int out_dim) : in_(in_dim), out_(out_dim) {
    params_ = Vec::Zero(static_cast<long>(in_) * out_ + out_);
  }
  Shape out_shape(const Shape&) const override { return {out_, 1, 1}; }
  Vec forward(const Vec& x, const Shape&, std::unique_ptr<LayerCache>* cache) const override {
    Eigen::Map<const Mat> weights(params_.data(), out_, in_);
    Eigen::Map<const Vec> bias(params_.data() + static_cast<long>(in_) * out_, out_);
    if (cache) {
      auto c = std::make_unique<DenseCache>();
      c->x = x;
      *cache = std::move(c);
    }
    return weights * x + bias;
  }
  Vec backward(const Vec& gy, const Shape&, const LayerCache& cache, Vec* param_grad) const override {
    const auto& dc = static_cast<const DenseCache&>(cache);
    if (param_grad) {
      Eigen::Map<Mat> gw(param_grad->data(), out_, in_);
      gw.noalias() += gy * dc.x.transpose();
      Eigen::Map<Vec> gb(param_grad->data() + static_cast<long>(in_) * out_, out_);
      gb += gy;
    }
    Eigen::Map<const Mat> weights(params_.data(), out_, in_);
    return weights.transpose() * gy;
  }
  std::string kind() const override { return "dense"; }
  void describe(std::vector<int>& spec) const override { spec = {in_, out_}; }

 private:
  int in_, out_;
};

}  // namespace

std::unique_ptr<Layer> make_conv(int in_c, int out_c, int ksize, int stride, int pad) {
  return std::make_unique<Conv>(in_c, out_c, ksize, stride, pad);
}
std::unique_ptr<Layer> make_relu() { return std::make_unique<Relu>(); }
std::unique_ptr<Layer> make_maxpool2() { return std::make_unique<MaxPool2>(); }
std::unique_ptr<Layer> make_dense(int in_dim, int out_dim) {
  return std::make_unique<Dense>(in_dim, out_dim);
}

std::unique_ptr<Layer> layer_from_spec(const std::string& kind, const std::vector<int>& spec) {
  if (kind == "conv") return make_conv(spec.at(0), spec.at(1), spec.at(2), spec.at(3), spec.at(4));
  if (kind == "relu") return make_relu();
  if (kind == "maxpool2") return make_maxpool2();
  if (kind == "dense") return make_dense(spec.at(0), spec.at(1));
  throw ConfigError("unknown layer kind: " + kind);
}

Network::Network(Shape input, std::vector<std::unique_ptr<Layer>> layers)
    : input_(input), layers_(std::move(layers)) {
  Shape s = input_;
  for (const auto& l : layers_) {
    layer_inputs_.push_back(s);
    s = l->out_shape(s);
  }
}

Network Network::clone() const {
  std::vector<std::unique_ptr<Layer>> layers;
  for (const auto& l : layers_) {
    std::vector<int> spec;
    l->describe(spec);
    auto copy = layer_from_spec(l->kind(), spec);
    copy->params() = l->params();
    layers.push_back(std::move(copy));
  }
  return Network(input_, std::move(layers));
}

void Network::init(Rng& rng) {
  for (size_t i = 0; i < layers_.size(); ++i) {
    Vec& p = layers_[i]->params();
    if (p.size() == 0) continue;
    std::vector<int> spec;
    layers_[i]->describe(spec);
    long fan_in = 0;
    if (layers_[i]->kind() == "conv") fan_in = static_cast<long>(spec[2]) * spec[2] * spec[0];
    else fan_in = spec[0];
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    // biases (the trailing out-dim entries) stay zero
    long n_weights;
    if (layers_[i]->kind() == "conv") n_weights = p.size() - spec[1];
    else n_weights = p.size() - spec[1];
    for (long k = 0; k < n_weights; ++k) p[k] = rng.normal(0.0, std);
    for (long k = n_weights; k < p.size(); ++k) p[k] = 0.0;
  }
}

Vec Network::forward(const Vec& x) const {
  Vec v = x;
  for (size_t i = 0; i < layers_.size(); ++i) v = layers_[i]->forward(v, layer_inputs_[i], nullptr);
  return v;
}

Vec Network::forward_traced(const Vec& x, Trace& trace) const {
  trace.inputs.clear();
  trace.caches.clear();
  Vec v = x;
  for (size_t i = 0; i < layers_.size(); ++i) {
    trace.inputs.push_back(v);
    std::unique_ptr<LayerCache> cache;
    v = layers_[i]->forward(v, layer_inputs_[i], &cache);
    trace.caches.push_back(std::move(cache));
  }
  return v;
}

Vec Network::backward(const Vec& gy, const Trace& trace, std::vector<Vec>* param_grads) const {
  Vec g = gy;
  for (size_t i = layers_.size(); i-- > 0;) {
    Vec* pg = param_grads ? &(*param_grads)[i] : nullptr;
    g = layers_[i]->backward(g, layer_inputs_[i], *trace.caches[i], pg);
  }
  return g;
}

std::vector<Vec> Network::zero_param_grads() const {
  std::vector<Vec> grads;
  for (const auto& l : layers_) grads.push_back(Vec::Zero(l->params().size()));
  return grads;
}

Shape Network::output_shape() const {
  Shape s = input_;
  for (const auto& l : layers_) s = l->out_shape(s);
  return s;
}

long Network::parameter_count() const {
  long n = 0;
  for (const auto& l : layers_) n += l->params().size();
  return n;
}

std::string Network::serialize() const {
  json j;
  j["input"] = {input_.c, input_.h, input_.w};
  json layers = json::array();
  for (const auto& l : layers_) {
    std::vector<int> spec;
    l->describe(spec);
    std::vector<double> w(l->params().data(), l->params().data() + l->params().size());
    layers.push_back(json{{"kind", l->kind()}, {"spec", spec}, {"weights", w}});
  }
  j["layers"] = layers;
  return j.dump();
}

void Network::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write network to " + path);
  out << serialize() << "\n";
}

Network Network::deserialize(const std::string& text) {
  json j = json::parse(text);
  Shape input{j.at("input")[0], j.at("input")[1], j.at("input")[2]};
  std::vector<std::unique_ptr<Layer>> layers;
  for (const auto& lj : j.at("layers")) {
    auto layer = layer_from_spec(lj.at("kind"), lj.at("spec").get<std::vector<int>>());
    const auto w = lj.at("weights").get<std::vector<double>>();
    if (static_cast<long>(w.size()) != layer->params().size())
      throw IoError("weight size mismatch in network checkpoint");
    layer->params() = Eigen::Map<const Vec>(w.data(), static_cast<long>(w.size()));
    layers.push_back(std::move(layer));
  }
  return Network(input, std::move(layers));
}

Network Network::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read network from " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(text);
}

Adam::Adam(Network& net, double lr, double beta1, double beta2, double eps)
    : net_(&net), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (size_t i = 0; i < net.n_layers(); ++i) {
    m_.push_back(Vec::Zero(net.layer(i).params().size()));
    v_.push_back(Vec::Zero(net.layer(i).params().size()));
  }
}

void Adam::step(const std::vector<Vec>& param_grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t i = 0; i < m_.size(); ++i) {
    if (m_[i].size() == 0) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * param_grads[i];
    v_[i] = beta2_ * v_[i].array() + (1.0 - beta2_) * param_grads[i].array().square();
    net_->layer(i).params().array() -=
        lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
  }
}

void AdamVec::step(Vec& params, const Vec& grad, double lr_scale) {
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_.array() + (1.0 - beta2_) * grad.array().square();
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  params.array() -= lr_ * lr_scale * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + eps_);
}

Vec softmax(const Vec& logits) {
  const double mx = logits.maxCoeff();
  Vec e = (logits.array() - mx).exp();
  return e / e.sum();
}

double softmax_cross_entropy(const Vec& logits, int label, Vec* gy) {
  Vec p = softmax(logits);
  const double loss = -std::log(std::max(p[label], 1e-300));
  if (gy) {
    *gy = p;
    (*gy)[label] -= 1.0;
  }
  return loss;
}

}  // namespace slap::nn
