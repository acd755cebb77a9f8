#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "crp/model_io.hpp"

namespace crp {

using nlohmann::json;

const char* to_string(LayerKind kind) noexcept {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::avgpool2d: return "avgpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::add: return "add";
    case LayerKind::batchnorm: return "batchnorm";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::conv1d, LayerKind::dense, LayerKind::relu, LayerKind::maxpool2d,
                      LayerKind::avgpool2d, LayerKind::flatten, LayerKind::add, LayerKind::batchnorm}) {
    if (s == to_string(k)) return k;
  }
  fail(ErrorKind::format, "unknown layer kind '" + s + "'");
}

void LinearParams::refresh() {
  w.assign(weight.data().begin(), weight.data().end());
  w_pos.resize(w.size());
  w_neg.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w_pos[i] = std::max(w[i], 0.0);
    w_neg[i] = std::min(w[i], 0.0);
  }
  b.assign(bias.data().begin(), bias.data().end());
}

// ---------------------------------------------------------------------------
// ModelGraph
// ---------------------------------------------------------------------------

std::size_t ModelGraph::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) fail(ErrorKind::not_found, "unknown layer '" + id + "'");
  return it->second;
}

std::optional<std::size_t> ModelGraph::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool ModelGraph::is_ancestor(std::size_t ancestor, std::size_t node) const {
  if (ancestor == node) return true;
  if (ancestor > node) return false;
  std::vector<char> seen(nodes_.size(), 0);
  std::vector<std::size_t> stack{node};
  while (!stack.empty()) {
    const std::size_t n = stack.back();
    stack.pop_back();
    for (std::size_t in : nodes_[n].inputs) {
      if (in == ancestor) return true;
      if (in > ancestor && !seen[in]) {
        seen[in] = 1;
        stack.push_back(in);
      }
    }
  }
  return false;
}

namespace {

std::string layer_err(const std::string& id, const std::string& msg) { return "layer '" + id + "': " + msg; }

void expect_shape(const std::string& id, const std::string& what, const Shape& got, const Shape& want) {
  if (got != want) {
    fail(ErrorKind::format, layer_err(id, what + " shape " + shape_to_string(got) + ", expected " + shape_to_string(want)));
  }
}

const Tensor& weight_tensor(const Blob& tensors, const std::string& layer, const std::string& name) {
  const AnyTensor* t = tensors.find(name);
  if (t == nullptr) fail(ErrorKind::format, "missing weight " + name + " (layer '" + layer + "')");
  const Tensor* f = std::get_if<Tensor>(t);
  if (f == nullptr) fail(ErrorKind::format, layer_err(layer, "weight " + name + " must be f32"));
  return *f;
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p, const std::string& id) {
  if (s == 0 || k == 0) fail(ErrorKind::format, layer_err(id, "kernel and stride must be >= 1"));
  if (in + 2 * p < k) fail(ErrorKind::format, layer_err(id, "kernel larger than padded input"));
  return (in + 2 * p - k) / s + 1;
}

}  // namespace

void ModelGraph::rebuild_links() {
  index_.clear();
  for (std::size_t i = 0; i < nodes_.size(); ++i) index_[nodes_[i].id()] = i;
  for (auto& n : nodes_) {
    n.successors.clear();
    n.inputs.clear();
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (const auto& in : nodes_[i].spec.inputs) {
      const std::size_t j = index_.at(in);
      nodes_[i].inputs.push_back(j);
      nodes_[j].successors.push_back(i);
    }
  }
}

void ModelGraph::infer_shapes() {
  for (std::size_t i = 1; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    const LayerSpec& s = n.spec;
    const Shape& in = nodes_[n.inputs.at(0)].out_shape;
    switch (s.kind) {
      case LayerKind::conv2d: {
        if (in.size() != 3) fail(ErrorKind::format, layer_err(s.id, "conv2d expects (C,H,W) input, got " + shape_to_string(in)));
        if (in[0] != s.in_channels) fail(ErrorKind::format, layer_err(s.id, "input has " + std::to_string(in[0]) + " channels, layer expects " + std::to_string(s.in_channels)));
        n.out_shape = {s.out_channels, conv_out(in[1], s.kernel[0], s.stride[0], s.padding[0], s.id),
                       conv_out(in[2], s.kernel[1], s.stride[1], s.padding[1], s.id)};
        break;
      }
      case LayerKind::conv1d: {
        if (in.size() != 2) fail(ErrorKind::format, layer_err(s.id, "conv1d expects (C,L) input, got " + shape_to_string(in)));
        if (in[0] != s.in_channels) fail(ErrorKind::format, layer_err(s.id, "input channel mismatch"));
        n.out_shape = {s.out_channels, conv_out(in[1], s.kernel[1], s.stride[1], s.padding[1], s.id)};
        break;
      }
      case LayerKind::dense: {
        if (shape_product(in) != s.in_channels) {
          fail(ErrorKind::format, layer_err(s.id, "input " + shape_to_string(in) + " has " + std::to_string(shape_product(in)) +
                                                     " features, layer expects " + std::to_string(s.in_channels)));
        }
        n.out_shape = {s.out_channels};
        break;
      }
      case LayerKind::relu:
      case LayerKind::batchnorm: n.out_shape = in; break;
      case LayerKind::maxpool2d:
      case LayerKind::avgpool2d: {
        if (in.size() != 3) fail(ErrorKind::format, layer_err(s.id, "pooling expects (C,H,W) input"));
        n.out_shape = {in[0], conv_out(in[1], s.kernel[0], s.stride[0], s.padding[0], s.id),
                       conv_out(in[2], s.kernel[1], s.stride[1], s.padding[1], s.id)};
        break;
      }
      case LayerKind::flatten: n.out_shape = {shape_product(in)}; break;
      case LayerKind::add: {
        const Shape& other = nodes_[n.inputs.at(1)].out_shape;
        if (in != other) {
          fail(ErrorKind::format, layer_err(s.id, "add inputs differ in shape: " + shape_to_string(in) + " vs " + shape_to_string(other)));
        }
        n.out_shape = in;
        break;
      }
      case LayerKind::input: fail(ErrorKind::format, layer_err(s.id, "only one input node allowed"));
    }
  }
}

ModelGraph ModelGraph::build(std::string input_id, Shape input_shape, std::vector<LayerSpec> layers,
                             const Blob& tensors, std::string output_id, std::string layout) {
  if (input_id.empty()) fail(ErrorKind::format, "input id must not be empty");
  if (input_shape.empty() || shape_product(input_shape) == 0) fail(ErrorKind::format, "invalid input shape");
  if (layout != "chw") fail(ErrorKind::format, "unsupported layout '" + layout + "' (only chw)");

  std::map<std::string, std::size_t> manifest_pos;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.id.empty()) fail(ErrorKind::format, "layer " + std::to_string(i) + " has an empty id");
    if (l.id == input_id || manifest_pos.count(l.id)) fail(ErrorKind::format, "duplicate layer id '" + l.id + "'");
    manifest_pos[l.id] = i;
  }
  for (const auto& l : layers) {
    const std::size_t want = l.kind == LayerKind::add ? 2 : 1;
    if (l.inputs.size() != want) {
      fail(ErrorKind::format, layer_err(l.id, std::string(to_string(l.kind)) + " needs exactly " + std::to_string(want) + " input(s)"));
    }
    for (const auto& in : l.inputs) {
      if (in != input_id && !manifest_pos.count(in)) fail(ErrorKind::format, layer_err(l.id, "unknown input '" + in + "'"));
    }
  }

  // Kahn's algorithm, always taking the earliest ready layer in manifest order.
  std::vector<char> placed(layers.size(), 0);
  std::set<std::string> done{input_id};
  std::vector<std::size_t> order;
  while (order.size() < layers.size()) {
    bool progressed = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (placed[i]) continue;
      const bool ready = std::all_of(layers[i].inputs.begin(), layers[i].inputs.end(),
                                     [&](const std::string& in) { return done.count(in) != 0; });
      if (ready) {
        placed[i] = 1;
        done.insert(layers[i].id);
        order.push_back(i);
        progressed = true;
        break;
      }
    }
    if (!progressed) {
      for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!placed[i]) fail(ErrorKind::format, layer_err(layers[i].id, "graph contains a cycle"));
      }
    }
  }

  ModelGraph g;
  g.layout_ = std::move(layout);
  Node input;
  input.spec.id = input_id;
  input.spec.kind = LayerKind::input;
  input.out_shape = std::move(input_shape);
  g.nodes_.push_back(std::move(input));
  for (std::size_t i : order) {
    Node n;
    n.spec = layers[i];
    g.nodes_.push_back(std::move(n));
  }
  g.rebuild_links();

  // Weights
  for (auto& n : g.nodes_) {
    const LayerSpec& s = n.spec;
    if (is_linear(s.kind)) {
      if (s.in_channels == 0 || s.out_channels == 0) fail(ErrorKind::format, layer_err(s.id, "channel counts must be >= 1"));
      Shape want;
      if (s.kind == LayerKind::conv2d) want = {s.out_channels, s.in_channels, s.kernel[0], s.kernel[1]};
      if (s.kind == LayerKind::conv1d) want = {s.out_channels, s.in_channels, s.kernel[1]};
      if (s.kind == LayerKind::dense) want = {s.out_channels, s.in_channels};
      if (s.weight.empty()) fail(ErrorKind::format, layer_err(s.id, "no weight tensor named"));
      n.linear.weight = weight_tensor(tensors, s.id, s.weight);
      expect_shape(s.id, "weight " + s.weight, n.linear.weight.shape(), want);
      if (!s.bias.empty()) {
        n.linear.bias = weight_tensor(tensors, s.id, s.bias);
        expect_shape(s.id, "bias " + s.bias, n.linear.bias.shape(), {s.out_channels});
      } else {
        n.linear.bias = Tensor({s.out_channels}, 0.0f);
      }
      n.linear.refresh();
    } else if (s.kind == LayerKind::batchnorm) {
      n.bn.gamma = weight_tensor(tensors, s.id, s.gamma);
      n.bn.beta = weight_tensor(tensors, s.id, s.beta);
      n.bn.mean = weight_tensor(tensors, s.id, s.mean);
      n.bn.var = weight_tensor(tensors, s.id, s.var);
      if (!(s.bn_epsilon >= 0.0)) fail(ErrorKind::format, layer_err(s.id, "batchnorm epsilon must be >= 0"));
    }
  }

  g.infer_shapes();
  for (const auto& n : g.nodes_) {
    if (n.kind() == LayerKind::batchnorm) {
      const Shape want{n.out_shape[0]};
      expect_shape(n.id(), "gamma", n.bn.gamma.shape(), want);
      expect_shape(n.id(), "beta", n.bn.beta.shape(), want);
      expect_shape(n.id(), "mean", n.bn.mean.shape(), want);
      expect_shape(n.id(), "var", n.bn.var.shape(), want);
    }
  }

  // Single output node
  std::vector<std::size_t> sinks;
  for (std::size_t i = 0; i < g.nodes_.size(); ++i) {
    if (g.nodes_[i].successors.empty()) sinks.push_back(i);
  }
  if (!output_id.empty()) {
    auto it = g.index_.find(output_id);
    if (it == g.index_.end()) fail(ErrorKind::format, "output layer '" + output_id + "' does not exist");
    g.output_ = it->second;
  } else {
    if (sinks.empty()) fail(ErrorKind::format, "graph has no output node");
    g.output_ = sinks.back();
  }
  for (std::size_t s : sinks) {
    if (s != g.output_) fail(ErrorKind::format, layer_err(g.nodes_[s].id(), "dangling node: graph must have a single output"));
  }
  if (g.output().out_shape.size() != 1) {
    fail(ErrorKind::format, "output layer '" + g.output().id() + "' must produce a rank-1 logit vector, got " +
                                shape_to_string(g.output().out_shape));
  }
  g.canonized_ = std::none_of(g.nodes_.begin(), g.nodes_.end(), [](const Node& n) { return n.kind() == LayerKind::batchnorm; });
  return g;
}

std::vector<LayerSpec> ModelGraph::layer_specs() const {
  std::vector<LayerSpec> out;
  for (std::size_t i = 1; i < nodes_.size(); ++i) out.push_back(nodes_[i].spec);
  return out;
}

Blob ModelGraph::weight_blob() const {
  Blob blob;
  for (const auto& n : nodes_) {
    const LayerSpec& s = n.spec;
    if (is_linear(s.kind)) {
      blob.add(s.weight, n.linear.weight);
      if (!s.bias.empty()) blob.add(s.bias, n.linear.bias);
    } else if (s.kind == LayerKind::batchnorm) {
      blob.add(s.gamma, n.bn.gamma);
      blob.add(s.beta, n.bn.beta);
      blob.add(s.mean, n.bn.mean);
      blob.add(s.var, n.bn.var);
    }
  }
  return blob;
}

namespace {

json pair_json(const std::array<std::size_t, 2>& v) { return json::array({v[0], v[1]}); }

std::array<std::size_t, 2> read_pair(const json& j, const char* key, std::size_t def, const std::string& id) {
  if (!j.contains(key)) return {def, def};
  const json& v = j.at(key);
  if (v.is_number_unsigned()) return {v.get<std::size_t>(), v.get<std::size_t>()};
  if (v.is_array() && v.size() == 2) return {v[0].get<std::size_t>(), v[1].get<std::size_t>()};
  fail(ErrorKind::format, layer_err(id, std::string("'") + key + "' must be an integer or a pair"));
}

json layer_to_json(const LayerSpec& s) {
  json j;
  j["id"] = s.id;
  j["kind"] = to_string(s.kind);
  j["inputs"] = s.inputs;
  switch (s.kind) {
    case LayerKind::conv2d:
      j["in_channels"] = s.in_channels;
      j["out_channels"] = s.out_channels;
      j["kernel"] = pair_json(s.kernel);
      j["stride"] = pair_json(s.stride);
      j["padding"] = pair_json(s.padding);
      j["weight"] = s.weight;
      if (!s.bias.empty()) j["bias"] = s.bias;
      break;
    case LayerKind::conv1d:
      j["in_channels"] = s.in_channels;
      j["out_channels"] = s.out_channels;
      j["kernel"] = s.kernel[1];
      j["stride"] = s.stride[1];
      j["padding"] = s.padding[1];
      j["weight"] = s.weight;
      if (!s.bias.empty()) j["bias"] = s.bias;
      break;
    case LayerKind::dense:
      j["in_features"] = s.in_channels;
      j["out_features"] = s.out_channels;
      j["weight"] = s.weight;
      if (!s.bias.empty()) j["bias"] = s.bias;
      break;
    case LayerKind::maxpool2d:
    case LayerKind::avgpool2d:
      j["kernel"] = pair_json(s.kernel);
      j["stride"] = pair_json(s.stride);
      j["padding"] = pair_json(s.padding);
      break;
    case LayerKind::batchnorm:
      j["gamma"] = s.gamma;
      j["beta"] = s.beta;
      j["mean"] = s.mean;
      j["var"] = s.var;
      j["epsilon"] = s.bn_epsilon;
      break;
    default: break;
  }
  return j;
}

LayerSpec layer_from_json(const json& j, std::size_t pos) {
  LayerSpec s;
  if (!j.is_object()) fail(ErrorKind::format, "layer " + std::to_string(pos) + " is not an object");
  if (!j.contains("id") || !j.at("id").is_string()) fail(ErrorKind::format, "layer " + std::to_string(pos) + " has no id");
  s.id = j.at("id").get<std::string>();
  if (!j.contains("kind")) fail(ErrorKind::format, layer_err(s.id, "missing kind"));
  try {
    s.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  } catch (const Error& e) {
    fail(ErrorKind::format, layer_err(s.id, e.what()));
  }
  if (j.contains("inputs")) s.inputs = j.at("inputs").get<std::vector<std::string>>();
  auto str = [&](const char* key, bool required) -> std::string {
    if (!j.contains(key)) {
      if (required) fail(ErrorKind::format, layer_err(s.id, std::string("missing '") + key + "'"));
      return {};
    }
    return j.at(key).get<std::string>();
  };
  auto uint = [&](const char* key) -> std::size_t {
    if (!j.contains(key)) fail(ErrorKind::format, layer_err(s.id, std::string("missing '") + key + "'"));
    return j.at(key).get<std::size_t>();
  };
  switch (s.kind) {
    case LayerKind::conv2d:
      s.in_channels = uint("in_channels");
      s.out_channels = uint("out_channels");
      s.kernel = read_pair(j, "kernel", 1, s.id);
      s.stride = read_pair(j, "stride", 1, s.id);
      s.padding = read_pair(j, "padding", 0, s.id);
      s.weight = str("weight", true);
      s.bias = str("bias", false);
      break;
    case LayerKind::conv1d:
      s.in_channels = uint("in_channels");
      s.out_channels = uint("out_channels");
      s.kernel = {1, j.value("kernel", std::size_t{1})};
      s.stride = {1, j.value("stride", std::size_t{1})};
      s.padding = {0, j.value("padding", std::size_t{0})};
      s.weight = str("weight", true);
      s.bias = str("bias", false);
      break;
    case LayerKind::dense:
      s.in_channels = uint("in_features");
      s.out_channels = uint("out_features");
      s.weight = str("weight", true);
      s.bias = str("bias", false);
      break;
    case LayerKind::maxpool2d:
    case LayerKind::avgpool2d:
      s.kernel = read_pair(j, "kernel", 2, s.id);
      s.stride = j.contains("stride") ? read_pair(j, "stride", 1, s.id) : s.kernel;
      s.padding = read_pair(j, "padding", 0, s.id);
      break;
    case LayerKind::batchnorm:
      s.gamma = str("gamma", true);
      s.beta = str("beta", true);
      s.mean = str("mean", true);
      s.var = str("var", true);
      s.bn_epsilon = j.value("epsilon", 1e-5);
      break;
    default: break;
  }
  return s;
}

}  // namespace

std::string ModelGraph::manifest_json() const {
  json j;
  j["format"] = "crp-model";
  j["version"] = 1;
  j["layout"] = layout_;
  j["input"] = {{"id", nodes_.front().id()}, {"shape", nodes_.front().out_shape}};
  j["output"] = output().id();
  json layers = json::array();
  for (std::size_t i = 1; i < nodes_.size(); ++i) layers.push_back(layer_to_json(nodes_[i].spec));
  j["layers"] = std::move(layers);
  return j.dump(2) + "\n";
}

std::string ModelGraph::fingerprint() const {
  auto bytes = encode_blob(weight_blob());
  const std::string m = manifest_json();
  bytes.insert(bytes.end(), m.begin(), m.end());
  return crp::fingerprint(bytes);
}

ModelGraph parse_model(const std::string& manifest_text, const Blob& weights) {
  json j;
  try {
    j = json::parse(manifest_text);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("manifest is not valid JSON: ") + e.what());
  }
  try {
    if (j.value("format", std::string("crp-model")) != "crp-model") fail(ErrorKind::format, "manifest format must be crp-model");
    if (j.value("version", 1) != 1) fail(ErrorKind::format, "unsupported manifest version");
    if (!j.contains("input") || !j.contains("layers")) fail(ErrorKind::format, "manifest needs 'input' and 'layers'");
    const json& in = j.at("input");
    const std::string input_id = in.value("id", std::string("input"));
    const Shape input_shape = in.at("shape").get<Shape>();
    std::vector<LayerSpec> layers;
    std::size_t pos = 0;
    for (const auto& l : j.at("layers")) layers.push_back(layer_from_json(l, pos++));
    return ModelGraph::build(input_id, input_shape, std::move(layers), weights, j.value("output", std::string()),
                             j.value("layout", std::string("chw")));
  } catch (const json::exception& e) {
    fail(ErrorKind::format, std::string("malformed manifest: ") + e.what());
  }
}

ModelGraph load_model(const std::filesystem::path& manifest_path, const std::filesystem::path& weights_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) fail(ErrorKind::format, "cannot open manifest " + manifest_path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model(ss.str(), read_blob(weights_path));
}

void save_model(const ModelGraph& g, const std::filesystem::path& manifest_path, const std::filesystem::path& weights_path) {
  write_text_file(manifest_path, g.manifest_json());
  write_blob(weights_path, g.weight_blob());
}

// ---------------------------------------------------------------------------
// Canonization
// ---------------------------------------------------------------------------

ModelGraph canonize(const ModelGraph& g) {
  std::vector<LayerSpec> specs;
  std::map<std::string, std::string> redirect;  // batchnorm id -> folded linear id
  std::map<std::string, LinearParams> folded;

  for (std::size_t i = 1; i < g.size(); ++i) {
    const Node& n = g.node(i);
    if (n.kind() != LayerKind::batchnorm) continue;
    const Node& prev = g.node(n.inputs.at(0));
    if (!is_linear(prev.kind())) {
      fail(ErrorKind::compute, "canonization: batchnorm '" + n.id() + "' does not directly follow a conv/dense layer");
    }
    if (prev.successors.size() != 1) {
      fail(ErrorKind::compute, "canonization: '" + prev.id() + "' feeds layers other than batchnorm '" + n.id() + "'");
    }
    LinearParams p = folded.count(prev.id()) ? folded[prev.id()] : prev.linear;
    const std::size_t out = p.weight.extent(0);
    const std::size_t fan = p.fan_in();
    for (std::size_t o = 0; o < out; ++o) {
      const double scale = static_cast<double>(n.bn.gamma[o]) / std::sqrt(static_cast<double>(n.bn.var[o]) + n.spec.bn_epsilon);
      for (std::size_t k = 0; k < fan; ++k) {
        auto& w = p.weight[o * fan + k];
        w = static_cast<float>(static_cast<double>(w) * scale);
      }
      p.bias[o] = static_cast<float>((static_cast<double>(p.bias[o]) - n.bn.mean[o]) * scale + n.bn.beta[o]);
    }
    p.refresh();
    folded[prev.id()] = std::move(p);
    std::string target = prev.id();
    while (redirect.count(target)) target = redirect[target];
    redirect[n.id()] = target;
  }

  auto resolve = [&](std::string id) {
    while (redirect.count(id)) id = redirect[id];
    return id;
  };

  ModelGraph out = g;
  std::vector<Node> kept;
  for (const Node& n : g.nodes()) {
    if (n.kind() == LayerKind::batchnorm) continue;
    Node copy = n;
    for (auto& in : copy.spec.inputs) in = resolve(in);
    if (auto it = folded.find(n.id()); it != folded.end()) {
      copy.linear = it->second;
      if (copy.spec.bias.empty()) copy.spec.bias = copy.spec.id + ".folded_bias";
    }
    kept.push_back(std::move(copy));
  }
  const std::string output_id = resolve(g.output().id());
  out.nodes_ = std::move(kept);
  out.rebuild_links();
  out.output_ = out.index_of(output_id);
  out.infer_shapes();
  out.canonized_ = true;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset container
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_lines(const ByteTensor& t) {
  std::vector<std::string> out;
  std::string cur;
  for (std::uint8_t c : t.data()) {
    if (c == '\n') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(c));
    }
  }
  out.push_back(cur);
  return out;
}

ByteTensor join_lines(const std::vector<std::string>& lines) {
  std::string s;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (i) s.push_back('\n');
    s += lines[i];
  }
  if (s.empty()) s.push_back('\n');  // extents must be >= 1; an empty list encodes as "\n"
  return ByteTensor({s.size()}, std::vector<std::uint8_t>(s.begin(), s.end()));
}

}  // namespace

const Tensor& DatasetContainer::sample(std::size_t i) const {
  if (i >= samples.size()) {
    fail(ErrorKind::not_found, "sample " + std::to_string(i) + " out of range (dataset has " + std::to_string(samples.size()) + ")");
  }
  return samples[i];
}

void DatasetContainer::validate() const {
  if (samples.empty()) fail(ErrorKind::format, "dataset has no samples");
  for (std::size_t i = 1; i < samples.size(); ++i) {
    if (samples[i].shape() != samples[0].shape()) {
      fail(ErrorKind::format, "heterogeneous sample shapes: sample/" + std::to_string(i) + " is " +
                                  shape_to_string(samples[i].shape()) + ", sample/0 is " + shape_to_string(samples[0].shape()));
    }
  }
  if (labels && labels->size() != samples.size()) {
    fail(ErrorKind::format, "labels length " + std::to_string(labels->size()) + " does not match sample count " +
                                std::to_string(samples.size()));
  }
  if (labels) {
    for (std::int32_t l : *labels) {
      if (l < 0) fail(ErrorKind::format, "negative label " + std::to_string(l));
    }
  }
  if (!provenance.empty() && provenance.size() != samples.size()) {
    fail(ErrorKind::format, "provenance length does not match sample count");
  }
}

void DatasetContainer::validate_against(const ModelGraph& g) const {
  validate();
  if (sample_shape() != g.input_shape()) {
    fail(ErrorKind::format, "dataset sample shape " + shape_to_string(sample_shape()) + " does not match model input " +
                                shape_to_string(g.input_shape()));
  }
  if (labels) {
    for (std::int32_t l : *labels) {
      if (static_cast<std::size_t>(l) >= g.num_outputs()) {
        fail(ErrorKind::format, "label " + std::to_string(l) + " exceeds model output count " + std::to_string(g.num_outputs()));
      }
    }
  }
}

Blob DatasetContainer::to_blob() const {
  Blob blob;
  for (std::size_t i = 0; i < samples.size(); ++i) blob.add("sample/" + std::to_string(i), samples[i]);
  if (labels) blob.add("labels", IntTensor({labels->size()}, *labels));
  if (!class_names.empty()) blob.add("meta/class_names", join_lines(class_names));
  if (!provenance.empty()) blob.add("meta/provenance", join_lines(provenance));
  return blob;
}

std::string DatasetContainer::fingerprint() const { return crp::fingerprint(encode_blob(to_blob())); }

DatasetContainer dataset_from_blob(const Blob& blob) {
  DatasetContainer d;
  std::map<std::size_t, const Tensor*> found;
  for (const auto& e : blob.entries()) {
    if (e.name.rfind("sample/", 0) == 0) {
      const std::string num = e.name.substr(7);
      if (num.empty() || !std::all_of(num.begin(), num.end(), ::isdigit)) fail(ErrorKind::format, "bad sample name " + e.name);
      const Tensor* t = std::get_if<Tensor>(&e.tensor);
      if (t == nullptr) fail(ErrorKind::format, e.name + " must be f32");
      found[std::stoul(num)] = t;
    }
  }
  std::size_t expect = 0;
  for (const auto& [id, t] : found) {
    if (id != expect) fail(ErrorKind::format, "sample ids are not contiguous: missing sample/" + std::to_string(expect));
    d.samples.push_back(*t);
    ++expect;
  }
  if (const AnyTensor* l = blob.find("labels")) {
    const IntTensor* li = std::get_if<IntTensor>(l);
    if (li == nullptr) fail(ErrorKind::format, "labels must be an i32 tensor");
    d.labels = li->values();
  }
  if (const AnyTensor* c = blob.find("meta/class_names")) d.class_names = split_lines(std::get<ByteTensor>(*c));
  if (const AnyTensor* p = blob.find("meta/provenance")) d.provenance = split_lines(std::get<ByteTensor>(*p));
  d.validate();
  return d;
}

DatasetContainer load_dataset(const std::filesystem::path& path) {
  try {
    return dataset_from_blob(read_blob(path));
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

void save_dataset(const DatasetContainer& data, const std::filesystem::path& path) {
  data.validate();
  write_blob(path, data.to_blob());
}

DatasetContainer merge_datasets(const DatasetContainer& a, const std::string& tag_a, const DatasetContainer& b,
                                const std::string& tag_b) {
  a.validate();
  b.validate();
  if (a.sample_shape() != b.sample_shape()) fail(ErrorKind::format, "cannot merge datasets with different sample shapes");
  DatasetContainer out;
  out.samples = a.samples;
  out.samples.insert(out.samples.end(), b.samples.begin(), b.samples.end());
  if (a.labels && b.labels) {
    out.labels = *a.labels;
    out.labels->insert(out.labels->end(), b.labels->begin(), b.labels->end());
  }
  out.class_names = !a.class_names.empty() ? a.class_names : b.class_names;
  auto tag_of = [](const DatasetContainer& d, const std::string& tag, std::size_t i) {
    return d.provenance.empty() ? tag + ":" + std::to_string(i) : tag + ":" + d.provenance[i];
  };
  for (std::size_t i = 0; i < a.size(); ++i) out.provenance.push_back(tag_of(a, tag_a, i));
  for (std::size_t i = 0; i < b.size(); ++i) out.provenance.push_back(tag_of(b, tag_b, i));
  return out;
}

}  // namespace crp
