#pragma once

#include <cstddef>
#include <vector>

#include "crp/model_io.hpp"

namespace crp::detail {

/// Sliding-window geometry shared by conv and pooling kernels. conv1d maps
/// onto it with H = 1 and a 1-tall kernel.
struct WindowGeometry {
  std::size_t channels = 1, height = 1, width = 1;
  std::size_t kh = 1, kw = 1, sh = 1, sw = 1, ph = 0, pw = 0;
  std::size_t out_h = 1, out_w = 1;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
  std::size_t plane() const { return height * width; }

  static WindowGeometry from(const Node& node, const Shape& in_shape);
};

/// cols[k * positions + p] with k = (c, i, j) over the patch; padded taps are 0.
void im2col(const double* x, const WindowGeometry& g, double* cols);

/// Scatter-adds cols back onto x; taps that fall into padding are dropped.
void col2im(const double* cols, const WindowGeometry& g, double* x);

}  // namespace crp::detail
