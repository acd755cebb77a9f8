#include "crp/forward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "crp/detail/conv_geometry.hpp"
#include "crp/simd/kernels.hpp"

namespace crp {

ActivationEdit ActivationEdit::zero(std::string layer, std::vector<std::size_t> channels) {
  ActivationEdit e;
  e.layer = std::move(layer);
  e.mode = Mode::zero_channels;
  e.channels = std::move(channels);
  return e;
}

ActivationEdit ActivationEdit::blend_with(std::string layer, BoolMask mask, Tensor donor, double alpha) {
  ActivationEdit e;
  e.layer = std::move(layer);
  e.mode = Mode::blend;
  e.mask = std::move(mask);
  e.donor = std::move(donor);
  e.alpha = alpha;
  return e;
}

ActivationEdit ActivationEdit::blend_mean_with(std::string layer, BoolMask mask, Tensor donor_means, double alpha) {
  ActivationEdit e;
  e.layer = std::move(layer);
  e.mode = Mode::blend_mean;
  e.mask = std::move(mask);
  e.donor_means = std::move(donor_means);
  e.alpha = alpha;
  return e;
}

ActivationTrace::ActivationTrace(const ModelGraph& graph, std::vector<Tensor> outputs,
                                 std::vector<std::vector<std::uint32_t>> argmax)
    : graph_(&graph), outputs_(std::move(outputs)), argmax_(std::move(argmax)) {}

std::size_t ActivationTrace::predicted_class() const {
  const auto l = logits().data();
  return static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin());
}

namespace kernels {

namespace {
std::vector<double> to_double(const Tensor& x) { return std::vector<double>(x.data().begin(), x.data().end()); }
}  // namespace

Tensor conv_forward(const Node& node, const Tensor& x) {
  const auto g = detail::WindowGeometry::from(node, x.shape());
  const std::size_t K = g.patch();
  const std::size_t P = g.positions();
  const std::size_t out_ch = node.spec.out_channels;
  const auto xd = to_double(x);
  std::vector<double> cols(K * P);
  detail::im2col(xd.data(), g, cols.data());

  std::vector<double> z(P);
  Tensor out(node.out_shape);
  const auto& W = node.linear.w;
  const auto& table = simd::active();
  for (std::size_t o = 0; o < out_ch; ++o) {
    std::fill(z.begin(), z.end(), node.linear.b[o]);
    for (std::size_t k = 0; k < K; ++k) table.axpy(W[o * K + k], cols.data() + k * P, z.data(), P);
    for (std::size_t p = 0; p < P; ++p) out[o * P + p] = static_cast<float>(z[p]);
  }
  return out;
}

Tensor dense_forward(const Node& node, const Tensor& x) {
  const std::size_t in = node.linear.fan_in();
  const std::size_t out_n = node.spec.out_channels;
  if (x.size() != in) fail(ErrorKind::shape, "layer '" + node.id() + "': dense input size mismatch");
  const auto xd = to_double(x);
  Tensor out({out_n});
  const auto& table = simd::active();
  for (std::size_t o = 0; o < out_n; ++o) {
    out[o] = static_cast<float>(node.linear.b[o] + table.dot(node.linear.w.data() + o * in, xd.data(), in));
  }
  return out;
}

Tensor relu_forward(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return out;
}

Tensor maxpool_forward(const Node& node, const Tensor& x, std::vector<std::uint32_t>& argmax) {
  const auto g = detail::WindowGeometry::from(node, x.shape());
  Tensor out(node.out_shape);
  argmax.assign(out.size(), 0);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        float best = -std::numeric_limits<float>::infinity();
        std::uint32_t best_idx = std::numeric_limits<std::uint32_t>::max();
        for (std::size_t i = 0; i < g.kh; ++i) {
          const long ih = static_cast<long>(oh * g.sh + i) - static_cast<long>(g.ph);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long iw = static_cast<long>(ow * g.sw + j) - static_cast<long>(g.pw);
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            const auto idx = static_cast<std::uint32_t>((c * g.height + ih) * g.width + iw);
            // strict comparison keeps the first (lowest index) maximum; row-major
            // window order visits indices in increasing order
            if (best_idx == std::numeric_limits<std::uint32_t>::max() || x[idx] > best) {
              best = x[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (c * g.out_h + oh) * g.out_w + ow;
        if (best_idx == std::numeric_limits<std::uint32_t>::max()) {
          fail(ErrorKind::compute, "layer '" + node.id() + "': pooling window lies entirely in padding");
        }
        out[o] = best;
        argmax[o] = best_idx;
      }
    }
  }
  return out;
}

Tensor avgpool_forward(const Node& node, const Tensor& x) {
  const auto g = detail::WindowGeometry::from(node, x.shape());
  const double inv = 1.0 / static_cast<double>(g.kh * g.kw);
  Tensor out(node.out_shape);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.kh; ++i) {
          const long ih = static_cast<long>(oh * g.sh + i) - static_cast<long>(g.ph);
          if (ih < 0 || ih >= static_cast<long>(g.height)) continue;
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long iw = static_cast<long>(ow * g.sw + j) - static_cast<long>(g.pw);
            if (iw < 0 || iw >= static_cast<long>(g.width)) continue;
            acc += x[(c * g.height + ih) * g.width + iw];
          }
        }
        out[(c * g.out_h + oh) * g.out_w + ow] = static_cast<float>(acc * inv);
      }
    }
  }
  return out;
}

Tensor add_forward(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) fail(ErrorKind::shape, "add: operand shapes differ");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor batchnorm_forward(const Node& node, const Tensor& x) {
  Tensor out = x;
  const std::size_t C = x.channels();
  const std::size_t stride = x.channel_stride();
  for (std::size_t c = 0; c < C; ++c) {
    const double scale = node.bn.gamma[c] / std::sqrt(static_cast<double>(node.bn.var[c]) + node.spec.bn_epsilon);
    for (std::size_t i = 0; i < stride; ++i) {
      auto& v = out[c * stride + i];
      v = static_cast<float>((v - static_cast<double>(node.bn.mean[c])) * scale + node.bn.beta[c]);
    }
  }
  return out;
}

}  // namespace kernels

void apply_edit(const ActivationEdit& edit, Tensor& z) {
  switch (edit.mode) {
    case ActivationEdit::Mode::zero_channels: {
      for (std::size_t c : edit.channels) {
        if (c >= z.channels()) {
          fail(ErrorKind::invalid_condition, "edit on '" + edit.layer + "': channel " + std::to_string(c) + " out of range");
        }
        auto ch = z.channel(c);
        std::fill(ch.begin(), ch.end(), 0.0f);
      }
      return;
    }
    case ActivationEdit::Mode::blend:
    case ActivationEdit::Mode::blend_mean: {
      if (!(edit.alpha >= 0.0 && edit.alpha <= 1.0)) fail(ErrorKind::usage, "blend alpha must lie in [0,1]");
      if (z.rank() != 3) fail(ErrorKind::shape, "blend edits need a (C,H,W) layer, '" + edit.layer + "' is " + shape_to_string(z.shape()));
      const Shape spatial{z.extent(1), z.extent(2)};
      if (edit.mask.shape != spatial) {
        fail(ErrorKind::shape, "blend mask " + shape_to_string(edit.mask.shape) + " does not match layer spatial shape " +
                                   shape_to_string(spatial));
      }
      const bool mean = edit.mode == ActivationEdit::Mode::blend_mean;
      if (!mean && edit.donor.shape() != z.shape()) {
        fail(ErrorKind::shape, "donor " + shape_to_string(edit.donor.shape()) + " does not match layer " + shape_to_string(z.shape()));
      }
      if (mean && edit.donor_means.shape() != Shape{z.extent(0)}) {
        fail(ErrorKind::shape, "donor means must have shape (" + std::to_string(z.extent(0)) + ")");
      }
      const std::size_t plane = spatial[0] * spatial[1];
      const double a = edit.alpha;
      for (std::size_t c = 0; c < z.extent(0); ++c) {
        for (std::size_t i = 0; i < plane; ++i) {
          if (!edit.mask.bits[i]) continue;
          const std::size_t idx = c * plane + i;
          const double d = mean ? edit.donor_means[c] : edit.donor[idx];
          // (1-a)Z + aD: exact Z at a=0 and exact D at a=1
          z[idx] = static_cast<float>((1.0 - a) * static_cast<double>(z[idx]) + a * d);
        }
      }
      return;
    }
  }
}

ActivationTrace forward(const ModelGraph& g, const Tensor& x, const std::vector<ActivationEdit>& edits) {
  if (x.shape() != g.input_shape()) {
    fail(ErrorKind::shape, "input shape " + shape_to_string(x.shape()) + " does not match model input " +
                               shape_to_string(g.input_shape()));
  }
  std::vector<std::vector<const ActivationEdit*>> by_node(g.size());
  for (const auto& e : edits) {
    const auto idx = g.find(e.layer);
    if (!idx) fail(ErrorKind::not_found, "edit on nonexistent layer '" + e.layer + "'");
    by_node[*idx].push_back(&e);
  }

  std::vector<Tensor> out(g.size());
  std::vector<std::vector<std::uint32_t>> argmax(g.size());
  out[0] = x;
  for (const ActivationEdit* e : by_node[0]) apply_edit(*e, out[0]);

  for (std::size_t i = 1; i < g.size(); ++i) {
    const Node& n = g.node(i);
    const Tensor& in = out[n.inputs[0]];
    try {
      switch (n.kind()) {
        case LayerKind::conv2d:
        case LayerKind::conv1d: out[i] = kernels::conv_forward(n, in); break;
        case LayerKind::dense: out[i] = kernels::dense_forward(n, in); break;
        case LayerKind::relu: out[i] = kernels::relu_forward(in); break;
        case LayerKind::maxpool2d: out[i] = kernels::maxpool_forward(n, in, argmax[i]); break;
        case LayerKind::avgpool2d: out[i] = kernels::avgpool_forward(n, in); break;
        case LayerKind::flatten: out[i] = in.reshaped(n.out_shape); break;
        case LayerKind::add: out[i] = kernels::add_forward(in, out[n.inputs[1]]); break;
        case LayerKind::batchnorm: out[i] = kernels::batchnorm_forward(n, in); break;
        case LayerKind::input: fail(ErrorKind::compute, "unexpected input node");
      }
    } catch (const Error& e) {
      fail(e.kind(), "node '" + n.id() + "': " + e.what());
    }
    if (out[i].shape() != n.out_shape) {
      fail(ErrorKind::shape, "node '" + n.id() + "': produced " + shape_to_string(out[i].shape()) + ", expected " +
                                 shape_to_string(n.out_shape));
    }
    for (const ActivationEdit* e : by_node[i]) apply_edit(*e, out[i]);
  }
  return ActivationTrace(g, std::move(out), std::move(argmax));
}

}  // namespace crp
