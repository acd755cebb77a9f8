#pragma once

#include <string>
#include <vector>

#include "crp/attribute.hpp"

namespace crp {

struct GraphNode {
  std::size_t id = 0;
  std::string layer;
  std::size_t channel = 0;
  double relevance = 0.0;
  double share = 0.0;  // relevance / root relevance
  std::size_t level = 0;
  long parent = -1;
  ConditionSet condition;           // path condition that produced this node
  std::vector<double> child_flows;  // complete per-channel flow at the next layer
};

struct GraphEdge {
  std::size_t from = 0, to = 0;
  double weight = 0.0;  // child flow / parent relevance
};

struct AttributionGraph {
  std::string root_layer;
  std::size_t root_channel = 0;
  std::string base_condition;
  std::string init;
  std::string rules;
  std::vector<std::string> layers;  // root layer first
  std::size_t k = 0;
  bool ascending = false;
  std::vector<GraphNode> nodes;     // breadth-first order
  std::vector<GraphEdge> edges;
  std::vector<std::string> warnings;

  std::size_t depth() const;
  std::vector<std::size_t> level_widths() const;
};

struct GraphOptions {
  std::vector<std::string> layers;  // below the root; empty = every conv/dense ancestor
  std::size_t k = 3;
  /// Rank children from least to most relevant.
  bool ascending = false;
  std::size_t workers = 1;
};

/// Conv/dense ancestors of `root_layer`, nearest first.
std::vector<std::string> default_graph_layers(const ModelGraph& g, const std::string& root_layer);

AttributionGraph build_graph(const ActivationTrace& trace, const ConditionSet& base, const InitSpec& init,
                             const RuleComposite& rules, const std::string& root_layer, std::size_t root_channel,
                             const GraphOptions& opts = {});

std::string export_graph(const AttributionGraph& graph);
/// Inverse of export_graph (path conditions and complete flows are not stored).
AttributionGraph parse_graph(const std::string& text);

}  // namespace crp
