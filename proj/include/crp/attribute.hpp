#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "crp/forward.hpp"

namespace crp {

/// Per-layer channel selections. Channels listed for one layer combine as OR,
/// entries for different layers combine as AND. Layers without an entry are
/// unrestricted.
struct ConditionSet {
  std::map<std::string, std::set<std::size_t>> layers;

  ConditionSet& add(const std::string& layer, std::size_t channel);
  ConditionSet& add(const std::string& layer, const std::vector<std::size_t>& channels);
  /// Copy with `layer` restricted to exactly `channels`.
  ConditionSet with(const std::string& layer, std::set<std::size_t> channels) const;
  bool empty() const noexcept { return layers.empty(); }

  /// Stable text form "layer:c,c;layer:c" used for cache keys.
  std::string canonical() const;
  /// Parses "layer:c[,c...]"; repeated calls accumulate.
  void parse_into(const std::string& spec);
};

/// Where the backward pass starts and with what values.
struct InitSpec {
  enum class Mode { logit, one_hot, vector, layer_activation };

  Mode mode = Mode::logit;
  std::size_t target_class = 0;
  Tensor64 values;   // vector mode
  std::string layer; // layer_activation mode
  std::size_t channel = 0;

  /// R_c = f_c(x), all other outputs 0.
  static InitSpec logit(std::size_t cls);
  static InitSpec one_hot(std::size_t cls);
  static InitSpec vector(Tensor64 v);
  /// Starts at an interior layer from the recorded activations of one channel.
  static InitSpec layer_activation(std::string layer, std::size_t channel);

  std::string canonical() const;
};

enum class Rule { epsilon, zplus, flat, passthrough, winner_take_all, proportional };

const char* to_string(Rule r) noexcept;
Rule rule_from_string(const std::string& s);

/// Assignment of propagation rules to nodes. Defaults: flat on the first
/// conv, z+ on other convs, epsilon on dense, winner-take-all on max pooling,
/// proportional (z+ over uniform weights) on average pooling, proportional
/// split on add, passthrough on relu/flatten.
struct RuleComposite {
  double epsilon = 1e-6;
  Rule first_conv = Rule::flat;
  Rule conv = Rule::zplus;
  Rule dense = Rule::epsilon;
  Rule maxpool = Rule::winner_take_all;
  Rule avgpool = Rule::proportional;
  Rule add = Rule::proportional;
  std::map<std::string, Rule> overrides;

  static RuleComposite epsilon_zplus_flat();
  /// flat on the first conv, z+ on every other linear node.
  static RuleComposite zplus_flat();
  /// The same rule on every linear node.
  static RuleComposite uniform(Rule r);
  /// flat on every linear and pooling node; used for receptive fields.
  static RuleComposite flat_all();
  static RuleComposite from_name(const std::string& name);

  /// One rule per node; throws if a rule does not apply to a node's kind.
  std::vector<Rule> resolve(const ModelGraph& g) const;
  std::string canonical() const;
};

/// Per-node relevance, same shapes as the activation trace.
class RelevanceTrace {
 public:
  RelevanceTrace(const ModelGraph& graph, std::vector<Tensor64> relevance, std::size_t start);

  const ModelGraph& graph() const noexcept { return *graph_; }
  const Tensor64& at(std::size_t node) const { return relevance_.at(node); }
  const Tensor64& at(const std::string& id) const { return relevance_.at(graph_->index_of(id)); }
  const Tensor64& input() const { return relevance_.front(); }
  std::size_t start_node() const noexcept { return start_; }
  std::size_t size() const noexcept { return relevance_.size(); }

  /// Input relevance with channels summed, (H, W) for image inputs.
  Tensor64 input_map() const;
  double layer_sum(std::size_t node) const;
  /// Spatially summed relevance per channel of a layer.
  std::vector<double> channel_relevance(const std::string& layer) const;

 private:
  const ModelGraph* graph_;
  std::vector<Tensor64> relevance_;
  std::size_t start_;
};

/// Conditional backward pass (CRP) over a recorded forward pass.
RelevanceTrace attribute(const ActivationTrace& trace, const ConditionSet& cond, const InitSpec& init,
                         const RuleComposite& rules, bool normalize_per_layer = false);

/// Lower-level entry: starts at `start_node` with `start_relevance`.
RelevanceTrace propagate(const ActivationTrace& trace, std::size_t start_node, Tensor64 start_relevance,
                         const ConditionSet& cond, const std::vector<Rule>& rules, double epsilon,
                         bool normalize_per_layer);

/// Contributions z_ij = a_i w_ij of a linear node and their aggregates
/// z_j = sum_i z_ij (the bias is not a contribution).
class PreActivationDecomposition {
 public:
  PreActivationDecomposition(const Node& node, const Tensor& input);
  PreActivationDecomposition(const Node&, Tensor&&) = delete;

  const Node& node() const noexcept { return *node_; }
  const Tensor& input() const noexcept { return *input_; }
  std::size_t num_inputs() const noexcept { return input_->size(); }
  std::size_t num_outputs() const;

  /// z_ij by direct indexing; zero when i is not connected to j.
  double contribution(std::size_t i, std::size_t j) const;
  Tensor64 aggregate() const;
  /// sum_i (z_ij)^+
  Tensor64 aggregate_positive() const;
  /// Inputs connected to each output, padded taps included.
  std::size_t connections_per_output() const;

 private:
  const Node* node_;
  const Tensor* input_;
};

/// R_i = sum_j z_ij / (z_j + eps * sign(z_j)) * R_j, with sign(0) = 1.
Tensor64 rule_epsilon(const PreActivationDecomposition& dec, const Tensor64& r_out, double epsilon);
/// R_i = sum_j (z_ij)^+ / sum_i (z_ij)^+ * R_j; outputs with no positive
/// contribution pass nothing on.
Tensor64 rule_zplus(const PreActivationDecomposition& dec, const Tensor64& r_out);
/// R_i = sum_j R_j / (#inputs connected to j); shares landing on padding vanish.
Tensor64 rule_flat(const PreActivationDecomposition& dec, const Tensor64& r_out);

/// Relevance flowing from each selected channel j of `upper` into each
/// channel i of `lower`.
struct ChannelFlow {
  std::string upper, lower;
  std::vector<std::size_t> upper_channels;  // column order
  Tensor64 matrix;                          // (C_lower, upper_channels.size())
};

/// `lower` must reach `upper` without crossing another conv/dense node.
ChannelFlow decompose_channel_flow(const ActivationTrace& trace, const ConditionSet& cond, const InitSpec& init,
                                   const RuleComposite& rules, const std::string& upper, const std::string& lower);

}  // namespace crp
