#pragma once

#include "quadfit/core/errors.hpp"

#include <cstddef>
#include <vector>

namespace quadfit {

/// Planar CHW image of doubles. RGB values live in [0,1], masks in {0,1}.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;  // size channels*height*width, plane-major

  Image() = default;
  Image(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  std::size_t size() const { return data.size(); }
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw ResolutionMismatch(what);
}

}  // namespace quadfit
