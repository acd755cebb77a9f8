#include "crp/detail/conv_geometry.hpp"

namespace crp::detail {

WindowGeometry WindowGeometry::from(const Node& node, const Shape& in_shape) {
  const LayerSpec& s = node.spec;
  WindowGeometry g;
  g.channels = in_shape[0];
  if (in_shape.size() == 3) {
    g.height = in_shape[1];
    g.width = in_shape[2];
    g.kh = s.kernel[0];
    g.sh = s.stride[0];
    g.ph = s.padding[0];
  } else {
    g.height = 1;
    g.width = in_shape[1];
  }
  g.kw = s.kernel[1];
  g.sw = s.stride[1];
  g.pw = s.padding[1];
  g.out_h = (g.height + 2 * g.ph - g.kh) / g.sh + 1;
  g.out_w = (g.width + 2 * g.pw - g.kw) / g.sw + 1;
  return g;
}

void im2col(const double* x, const WindowGeometry& g, double* cols) {
  const std::size_t P = g.positions();
  std::size_t k = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j, ++k) {
        double* row = cols + k * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.sh + i) - static_cast<long>(g.ph);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.sw + j) - static_cast<long>(g.pw);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.height) && iw < static_cast<long>(g.width);
            row[oh * g.out_w + ow] = inside ? x[(c * g.height + ih) * g.width + iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const WindowGeometry& g, double* x) {
  const std::size_t P = g.positions();
  std::size_t k = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j, ++k) {
        const double* row = cols + k * P;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const long ih = static_cast<long>(oh * g.sh + i) - static_cast<long>(g.ph);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const long iw = static_cast<long>(ow * g.sw + j) - static_cast<long>(g.pw);
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            x[(c * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace crp::detail
