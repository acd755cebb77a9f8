#include "crp/graphs.hpp"

#include <algorithm>
#include <json.hpp>
#include <numeric>

#include "crp/parallel.hpp"

namespace crp {

using json = nlohmann::json;

std::size_t AttributionGraph::depth() const {
  std::size_t d = 0;
  for (const auto& n : nodes) d = std::max(d, n.level);
  return d;
}

std::vector<std::size_t> AttributionGraph::level_widths() const {
  std::vector<std::size_t> w(nodes.empty() ? 0 : depth() + 1, 0);
  for (const auto& n : nodes) ++w[n.level];
  return w;
}

std::vector<std::string> default_graph_layers(const ModelGraph& g, const std::string& root_layer) {
  const std::size_t root = g.index_of(root_layer);
  std::vector<std::string> out;
  for (std::size_t i = root; i-- > 1;) {
    const auto kind = g.node(i).kind();
    if ((kind == LayerKind::conv2d || kind == LayerKind::conv1d || kind == LayerKind::dense) && g.is_ancestor(i, root)) {
      out.push_back(g.node(i).id());
    }
  }
  return out;
}

AttributionGraph build_graph(const ActivationTrace& trace, const ConditionSet& base, const InitSpec& init,
                             const RuleComposite& rules, const std::string& root_layer, std::size_t root_channel,
                             const GraphOptions& opts) {
  const ModelGraph& g = trace.graph();
  const auto root_idx = g.find(root_layer);
  if (!root_idx) fail(ErrorKind::not_found, "unknown layer '" + root_layer + "'");
  if (root_channel >= g.node(*root_idx).out_shape[0]) {
    fail(ErrorKind::not_found, "channel " + std::to_string(root_channel) + " out of range for '" + root_layer + "'");
  }
  if (opts.k < 1) fail(ErrorKind::usage, "k must be at least 1");

  AttributionGraph graph;
  graph.root_layer = root_layer;
  graph.root_channel = root_channel;
  graph.base_condition = base.canonical();
  graph.init = init.canonical();
  graph.rules = rules.canonical();
  graph.k = opts.k;
  graph.ascending = opts.ascending;
  graph.layers.push_back(root_layer);
  const auto below = opts.layers.empty() ? default_graph_layers(g, root_layer) : opts.layers;
  std::size_t prev = *root_idx;
  for (const auto& l : below) {
    const auto idx = g.find(l);
    if (!idx) fail(ErrorKind::not_found, "unknown layer '" + l + "'");
    if (*idx == prev || !g.is_ancestor(*idx, prev)) {
      fail(ErrorKind::usage, "graph layers must descend from the root: '" + l + "' does not feed '" +
                                 g.node(prev).id() + "'");
    }
    if (*idx == 0) fail(ErrorKind::usage, "the input layer cannot be a graph level");
    graph.layers.push_back(l);
    prev = *idx;
  }

  GraphNode root;
  root.layer = root_layer;
  root.channel = root_channel;
  root.condition = base.with(root_layer, {root_channel});
  {
    const auto rt = attribute(trace, root.condition, init, rules);
    root.relevance = rt.channel_relevance(root_layer)[root_channel];
  }
  root.share = root.relevance != 0.0 ? 1.0 : 0.0;
  const double root_rel = root.relevance;
  graph.nodes.push_back(root);

  std::vector<std::size_t> frontier{0};
  for (std::size_t level = 1; level < graph.layers.size() && !frontier.empty(); ++level) {
    const std::string& lower = graph.layers[level];
    const std::size_t C = g.node(lower).out_shape[0];
    const std::size_t k = std::min(opts.k, C);
    if (opts.k > C) {
      graph.warnings.push_back("k=" + std::to_string(opts.k) + " clamped to " + std::to_string(C) + " channels of '" +
                               lower + "'");
    }
    parallel_for(frontier.size(), opts.workers, [&](std::size_t f) {
      GraphNode& node = graph.nodes[frontier[f]];
      if (node.relevance == 0.0) return;
      const auto rt = attribute(trace, node.condition, init, rules);
      node.child_flows = rt.channel_relevance(lower);
    });
    std::vector<std::size_t> next;
    for (std::size_t parent : frontier) {
      if (graph.nodes[parent].relevance == 0.0) continue;
      const auto flows = graph.nodes[parent].child_flows;
      std::vector<std::size_t> order(C);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return opts.ascending ? flows[a] < flows[b] : flows[a] > flows[b];
      });
      for (std::size_t r = 0; r < k; ++r) {
        const std::size_t c = order[r];
        GraphNode child;
        child.id = graph.nodes.size();
        child.layer = lower;
        child.channel = c;
        child.relevance = flows[c];
        child.share = root_rel != 0.0 ? flows[c] / root_rel : 0.0;
        child.level = level;
        child.parent = static_cast<long>(parent);
        child.condition = graph.nodes[parent].condition.with(lower, {c});
        graph.edges.push_back({parent, child.id, flows[c] / graph.nodes[parent].relevance});
        next.push_back(child.id);
        graph.nodes.push_back(std::move(child));
      }
    }
    frontier = std::move(next);
  }
  return graph;
}

std::string export_graph(const AttributionGraph& graph) {
  json j;
  j["format"] = "crp-graph";
  j["version"] = 1;
  j["root"] = {{"layer", graph.root_layer},
               {"channel", graph.root_channel},
               {"condition", graph.base_condition},
               {"init", graph.init}};
  j["rules"] = graph.rules;
  j["layers"] = graph.layers;
  j["k"] = graph.k;
  j["order"] = graph.ascending ? "ascending" : "descending";
  j["weight_normalization"] = "child flow / parent relevance over all channels";
  j["depth"] = graph.depth();
  j["level_widths"] = graph.level_widths();
  json nodes = json::array();
  for (const auto& n : graph.nodes) {
    nodes.push_back({{"id", n.id},
                     {"layer", n.layer},
                     {"channel", n.channel},
                     {"relevance", n.relevance},
                     {"share", n.share},
                     {"level", n.level},
                     {"parent", n.parent >= 0 ? json(n.parent) : json(nullptr)}});
  }
  j["nodes"] = std::move(nodes);
  json edges = json::array();
  for (const auto& e : graph.edges) edges.push_back({{"from", e.from}, {"to", e.to}, {"weight", e.weight}});
  j["edges"] = std::move(edges);
  j["warnings"] = graph.warnings;
  return j.dump(2) + "\n";
}

AttributionGraph parse_graph(const std::string& text) {
  AttributionGraph g;
  try {
    const json j = json::parse(text);
    if (j.value("format", "") != "crp-graph") fail(ErrorKind::format, "not a crp-graph document");
    g.root_layer = j.at("root").at("layer").get<std::string>();
    g.root_channel = j.at("root").at("channel").get<std::size_t>();
    g.base_condition = j.at("root").at("condition").get<std::string>();
    g.init = j.at("root").at("init").get<std::string>();
    g.rules = j.at("rules").get<std::string>();
    g.layers = j.at("layers").get<std::vector<std::string>>();
    g.k = j.at("k").get<std::size_t>();
    g.ascending = j.at("order").get<std::string>() == "ascending";
    for (const auto& n : j.at("nodes")) {
      GraphNode node;
      node.id = n.at("id").get<std::size_t>();
      node.layer = n.at("layer").get<std::string>();
      node.channel = n.at("channel").get<std::size_t>();
      node.relevance = n.at("relevance").get<double>();
      node.share = n.at("share").get<double>();
      node.level = n.at("level").get<std::size_t>();
      node.parent = n.at("parent").is_null() ? -1 : n.at("parent").get<long>();
      g.nodes.push_back(std::move(node));
    }
    for (const auto& e : j.at("edges")) {
      g.edges.push_back({e.at("from").get<std::size_t>(), e.at("to").get<std::size_t>(), e.at("weight").get<double>()});
    }
    g.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("graph document: ") + e.what());
  }
  return g;
}

}  // namespace crp
