#pragma once

#include <algorithm>
#include <cassert>
#include <string>
#include <vector>

#include "slap/errors.hpp"

namespace slap {

/// RGB image with real-valued channels in [0,1]. Row-major, interleaved.
/// An optional alpha plane (same layout, one channel) rides alongside for
/// compositing; empty alpha means fully opaque.
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0)
      : h_(height), w_(width), data_(static_cast<size_t>(height) * width * 3, fill) {
    if (height < 1 || width < 1) throw DimensionMismatch("image dims must be >= 1");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  size_t pixels() const { return static_cast<size_t>(h_) * w_; }

  double& at(int y, int x, int c) { return data_[(static_cast<size_t>(y) * w_ + x) * 3 + c]; }
  double at(int y, int x, int c) const { return data_[(static_cast<size_t>(y) * w_ + x) * 3 + c]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool has_alpha() const { return !alpha_.empty(); }
  void ensure_alpha(double fill = 1.0) {
    if (alpha_.empty()) alpha_.assign(pixels(), fill);
  }
  double& alpha(int y, int x) { return alpha_[static_cast<size_t>(y) * w_ + x]; }
  double alpha_or(int y, int x, double dflt = 1.0) const {
    return alpha_.empty() ? dflt : alpha_[static_cast<size_t>(y) * w_ + x];
  }
  std::vector<double>& alpha_plane() { return alpha_; }
  const std::vector<double>& alpha_plane() const { return alpha_; }

  void clamp01() {
    for (auto& v : data_) v = std::clamp(v, 0.0, 1.0);
    for (auto& v : alpha_) v = std::clamp(v, 0.0, 1.0);
  }

  bool same_size(const Image& o) const { return h_ == o.h_ && w_ == o.w_; }

 private:
  int h_ = 0;
  int w_ = 0;
  std::vector<double> data_;
  std::vector<double> alpha_;
};

// 8-bit PNG persistence; values are round(v*255) on write, v/255 on read.
void write_png(const Image& img, const std::string& path);
Image read_png(const std::string& path);

}  // namespace slap
