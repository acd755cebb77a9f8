#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crp/model_io.hpp"

namespace crp {

/// Replacement applied to one layer's output before its successors read it.
struct ActivationEdit {
  enum class Mode { zero_channels, blend, blend_mean };

  std::string layer;
  Mode mode = Mode::zero_channels;
  std::vector<std::size_t> channels;  // zero_channels
  BoolMask mask;                      // blend modes: spatial (H, W)
  Tensor donor;                       // blend: (C, H, W)
  Tensor donor_means;                 // blend_mean: (C,)
  double alpha = 0.0;

  static ActivationEdit zero(std::string layer, std::vector<std::size_t> channels);
  /// Z(alpha) = Z + alpha * M o (donor - Z)
  static ActivationEdit blend_with(std::string layer, BoolMask mask, Tensor donor, double alpha);
  /// Same blend with the donor replaced by its per-channel spatial mean.
  static ActivationEdit blend_mean_with(std::string layer, BoolMask mask, Tensor donor_means, double alpha);
};

/// Per-node outputs of one forward pass. Index 0 is the input; linear nodes
/// hold their pre-activations (ReLU is a separate node).
class ActivationTrace {
 public:
  ActivationTrace(const ModelGraph& graph, std::vector<Tensor> outputs, std::vector<std::vector<std::uint32_t>> argmax);

  const ModelGraph& graph() const noexcept { return *graph_; }
  const Tensor& at(std::size_t node) const { return outputs_.at(node); }
  const Tensor& at(const std::string& id) const { return outputs_.at(graph_->index_of(id)); }
  const Tensor& input() const { return outputs_.front(); }
  const Tensor& logits() const { return outputs_[graph_->output_index()]; }
  std::size_t size() const noexcept { return outputs_.size(); }

  /// Winning input index per output element of a maxpool node.
  const std::vector<std::uint32_t>& argmax(std::size_t node) const { return argmax_.at(node); }

  std::size_t predicted_class() const;

 private:
  const ModelGraph* graph_;
  std::vector<Tensor> outputs_;
  std::vector<std::vector<std::uint32_t>> argmax_;
};

/// Runs inference. The graph must outlive the returned trace.
ActivationTrace forward(const ModelGraph& g, const Tensor& x, const std::vector<ActivationEdit>& edits = {});

/// Applies one edit in place to a layer output; exposed for tests.
void apply_edit(const ActivationEdit& edit, Tensor& z);

namespace kernels {

Tensor conv_forward(const Node& node, const Tensor& x);
Tensor dense_forward(const Node& node, const Tensor& x);
Tensor relu_forward(const Tensor& x);
/// Ties resolve to the lowest linear index within the window.
Tensor maxpool_forward(const Node& node, const Tensor& x, std::vector<std::uint32_t>& argmax);
Tensor avgpool_forward(const Node& node, const Tensor& x);
Tensor add_forward(const Tensor& a, const Tensor& b);
Tensor batchnorm_forward(const Node& node, const Tensor& x);

}  // namespace kernels

}  // namespace crp
