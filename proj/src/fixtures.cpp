#include "crp/fixtures.hpp"

#include <cmath>

namespace crp {

namespace {

LayerSpec conv(std::string id, std::string in, std::size_t cin, std::size_t cout, std::size_t k, std::size_t s = 1,
               std::size_t p = 0) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.inputs = {std::move(in)};
  l.in_channels = cin;
  l.out_channels = cout;
  l.kernel = {k, k};
  l.stride = {s, s};
  l.padding = {p, p};
  l.weight = id + ".w";
  l.bias = id + ".b";
  l.id = std::move(id);
  return l;
}

LayerSpec dense(std::string id, std::string in, std::size_t n_in, std::size_t n_out) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.inputs = {std::move(in)};
  l.in_channels = n_in;
  l.out_channels = n_out;
  l.weight = id + ".w";
  l.bias = id + ".b";
  l.id = std::move(id);
  return l;
}

LayerSpec unary(std::string id, LayerKind kind, std::string in) {
  LayerSpec l;
  l.id = std::move(id);
  l.kind = kind;
  l.inputs = {std::move(in)};
  return l;
}

LayerSpec pool(std::string id, std::string in, std::size_t k) {
  LayerSpec l = unary(std::move(id), LayerKind::maxpool2d, std::move(in));
  l.kernel = {k, k};
  l.stride = {k, k};
  return l;
}

Tensor uniform(const Shape& shape, FixtureRng& rng, double lo, double hi) {
  Tensor t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

/// Random weights for every linear layer, drawn in manifest order.
Blob random_weights(const std::vector<LayerSpec>& layers, FixtureRng& rng) {
  Blob b;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::conv2d) {
      b.add(l.weight, uniform({l.out_channels, l.in_channels, l.kernel[0], l.kernel[1]}, rng, -0.5, 0.5));
      b.add(l.bias, uniform({l.out_channels}, rng, -0.5, 0.5));
    } else if (l.kind == LayerKind::dense) {
      b.add(l.weight, uniform({l.out_channels, l.in_channels}, rng, -0.5, 0.5));
      b.add(l.bias, uniform({l.out_channels}, rng, -0.5, 0.5));
    }
  }
  return b;
}

DatasetContainer random_dataset(const Shape& shape, std::size_t n, std::size_t classes, FixtureRng& rng, double lo,
                                double hi) {
  DatasetContainer d;
  std::vector<std::int32_t> labels;
  for (std::size_t i = 0; i < n; ++i) {
    d.samples.push_back(uniform(shape, rng, lo, hi));
    labels.push_back(static_cast<std::int32_t>(rng.below(classes)));
  }
  d.labels = std::move(labels);
  for (std::size_t c = 0; c < classes; ++c) d.class_names.push_back("class" + std::to_string(c));
  return d;
}

Fixture mlp8() {
  Fixture f;
  f.name = "mlp8";
  f.seed = 0x6d6c7038ULL;
  f.description =
      "dense 4->3, relu, dense 3->3, relu, dense 3->2 with hand-set weights (8 units). "
      "x=[1,0,0,0] gives logits [1.2, 0.6].";
  std::vector<LayerSpec> layers = {dense("fc1", "x", 4, 3), unary("relu1", LayerKind::relu, "fc1"),
                                   dense("fc2", "relu1", 3, 3), unary("relu2", LayerKind::relu, "fc2"),
                                   dense("fc3", "relu2", 3, 2)};
  Blob b;
  b.add("fc1.w", Tensor({3, 4}, {1.0f, -1.0f, 0.5f, 0.0f, 0.5f, 0.5f, -1.0f, 1.0f, -0.5f, 1.0f, 1.0f, -0.5f}));
  b.add("fc1.b", Tensor({3}, {0.0f, 0.1f, -0.1f}));
  b.add("fc2.w", Tensor({3, 3}, {1.0f, -0.5f, 0.5f, -1.0f, 1.0f, 0.5f, 0.5f, 0.5f, -1.0f}));
  b.add("fc2.b", Tensor({3}, {0.1f, 0.0f, 0.0f}));
  b.add("fc3.w", Tensor({2, 3}, {1.0f, -1.0f, 0.5f, -0.5f, 1.0f, 1.0f}));
  b.add("fc3.b", Tensor({2}, {0.0f, 0.2f}));
  f.model = ModelGraph::build("x", {4}, layers, b);

  FixtureRng rng(f.seed);
  f.data = random_dataset({4}, 6, 2, rng, -1.0, 1.0);
  f.data.samples[0] = Tensor({4}, {1.0f, 0.0f, 0.0f, 0.0f});
  return f;
}

Fixture singlepath() {
  Fixture f;
  f.name = "singlepath";
  f.seed = 0x73696e67ULL;
  f.description =
      "conv 1->3 k3 on (1,4,4), relu, flatten, dense 12->2. Logit 0 reads only conv channel 0 "
      "(positive weights, bias 0.1); logit 1 reads channels 1 and 2.";
  std::vector<LayerSpec> layers = {conv("conv1", "x", 1, 3, 3), unary("relu1", LayerKind::relu, "conv1"),
                                   unary("flat", LayerKind::flatten, "relu1"), dense("fc", "flat", 12, 2)};
  FixtureRng rng(f.seed);
  Tensor cw({3, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) cw[i] = static_cast<float>(rng.uniform(0.1, 0.5));
  for (std::size_t i = 9; i < 27; ++i) cw[i] = static_cast<float>(rng.uniform(-0.5, 0.5));
  Tensor fw({2, 12}, 0.0f);
  for (std::size_t i = 0; i < 4; ++i) fw[i] = static_cast<float>(rng.uniform(0.2, 0.6));
  for (std::size_t i = 4; i < 12; ++i) fw[12 + i] = static_cast<float>(rng.uniform(-0.5, 0.5));
  Blob b;
  b.add("conv1.w", cw);
  b.add("conv1.b", Tensor({3}, {0.0f, 0.1f, -0.2f}));
  b.add("fc.w", fw);
  b.add("fc.b", Tensor({2}, {0.1f, 0.0f}));
  f.model = ModelGraph::build("x", {1, 4, 4}, layers, b);
  f.data = random_dataset({1, 4, 4}, 4, 2, rng, 0.1, 1.0);
  return f;
}

Fixture lenet_random() {
  Fixture f;
  f.name = "lenet_random";
  f.seed = 0x4c654e6574353130ULL;
  f.description =
      "LeNet-5 topology on (1,32,32): conv 6@5x5, relu, maxpool 2, conv 16@5x5, relu, maxpool 2, "
      "dense 400->120->84->10 with relu between (dense flattens its input). Weights uniform in [-0.5,0.5]; "
      "200 samples uniform in [0,1].";
  std::vector<LayerSpec> layers = {conv("conv1", "x", 1, 6, 5),       unary("relu1", LayerKind::relu, "conv1"),
                                   pool("pool1", "relu1", 2),         conv("conv2", "pool1", 6, 16, 5),
                                   unary("relu2", LayerKind::relu, "conv2"), pool("pool2", "relu2", 2),
                                   dense("fc1", "pool2", 400, 120),   unary("relu3", LayerKind::relu, "fc1"),
                                   dense("fc2", "relu3", 120, 84),    unary("relu4", LayerKind::relu, "fc2"),
                                   dense("fc3", "relu4", 84, 10)};
  FixtureRng rng(f.seed);
  f.model = ModelGraph::build("x", {1, 32, 32}, layers, random_weights(layers, rng));
  f.data = random_dataset({1, 32, 32}, 200, 10, rng, 0.0, 1.0);
  return f;
}

Fixture resnet_micro() {
  Fixture f;
  f.name = "resnet_micro";
  f.seed = 0x7265736eULL;
  f.description =
      "(2,3,3) input; conv1 2->2 k2 s2 p1, relu1, conv2 2->2 k1, relu2, add(relu1, relu2), relu3, "
      "flatten, dense 8->3 (19 units).";
  std::vector<LayerSpec> layers = {conv("conv1", "x", 2, 2, 2, 2, 1), unary("relu1", LayerKind::relu, "conv1"),
                                   conv("conv2", "relu1", 2, 2, 1),     unary("relu2", LayerKind::relu, "conv2"),
                                   unary("add", LayerKind::add, "relu1"), unary("relu3", LayerKind::relu, "add"),
                                   unary("flat", LayerKind::flatten, "relu3"), dense("fc", "flat", 8, 3)};
  layers[4].inputs = {"relu1", "relu2"};
  FixtureRng rng(f.seed);
  f.model = ModelGraph::build("x", {2, 3, 3}, layers, random_weights(layers, rng));
  f.data = random_dataset({2, 3, 3}, 8, 3, rng, -1.0, 1.0);
  return f;
}

Fixture conv_bn() {
  Fixture f;
  f.name = "conv_bn";
  f.seed = 0x636f6e76626eULL;
  f.description = "conv 3->4 k3 p1 on (3,8,8), batchnorm, relu, flatten, dense 256->3; not canonized.";
  std::vector<LayerSpec> layers = {conv("conv1", "x", 3, 4, 3, 1, 1), unary("bn1", LayerKind::batchnorm, "conv1"),
                                   unary("relu1", LayerKind::relu, "bn1"), unary("flat", LayerKind::flatten, "relu1"),
                                   dense("fc", "flat", 256, 3)};
  layers[1].gamma = "bn1.gamma";
  layers[1].beta = "bn1.beta";
  layers[1].mean = "bn1.mean";
  layers[1].var = "bn1.var";
  FixtureRng rng(f.seed);
  Blob b = random_weights(layers, rng);
  b.add("bn1.gamma", uniform({4}, rng, 0.5, 1.5));
  b.add("bn1.beta", uniform({4}, rng, -0.5, 0.5));
  b.add("bn1.mean", uniform({4}, rng, -0.5, 0.5));
  b.add("bn1.var", uniform({4}, rng, 0.5, 2.0));
  f.model = ModelGraph::build("x", {3, 8, 8}, layers, b);
  f.data = random_dataset({3, 8, 8}, 4, 3, rng, -1.0, 1.0);
  return f;
}

}  // namespace

std::vector<std::string> fixture_names() { return {"mlp8", "singlepath", "lenet_random", "resnet_micro", "conv_bn"}; }

Fixture make_fixture(const std::string& name) {
  if (name == "mlp8") return mlp8();
  if (name == "singlepath") return singlepath();
  if (name == "lenet_random") return lenet_random();
  if (name == "resnet_micro") return resnet_micro();
  if (name == "conv_bn") return conv_bn();
  fail(ErrorKind::not_found, "unknown fixture '" + name + "'");
}

Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo, double hi) {
  FixtureRng rng(seed);
  return uniform(shape, rng, lo, hi);
}

ModelGraph make_conv_stack(std::size_t height, std::size_t width, const std::vector<ConvStage>& stages,
                           std::uint64_t seed) {
  std::vector<LayerSpec> layers;
  std::string prev = "x";
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    layers.push_back(conv("conv" + std::to_string(i + 1), prev, 1, 1, s.kernel, s.stride, s.padding));
    prev = layers.back().id;
  }
  layers.push_back(unary("flat", LayerKind::flatten, prev));
  // the dense width is only known after shape inference; build twice
  FixtureRng rng(seed);
  Blob probe = random_weights(layers, rng);
  const ModelGraph partial = ModelGraph::build("x", {1, height, width}, layers, probe);
  const std::size_t n = partial.node("flat").out_shape[0];
  layers.push_back(dense("out", "flat", n, 1));
  FixtureRng rng2(seed);
  return ModelGraph::build("x", {1, height, width}, layers, random_weights(layers, rng2));
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

namespace {

struct Connection {
  long i;  // -1 for a padded tap
  std::size_t j;
  double w;
};

/// Every (input, output, weight) triple of a conv or dense node, padded taps included.
std::vector<Connection> enumerate_connections(const Node& n, const Shape& in_shape) {
  std::vector<Connection> out;
  const auto& W = n.linear.weight;
  if (n.kind() == LayerKind::dense) {
    const std::size_t I = shape_product(in_shape);
    for (std::size_t j = 0; j < n.spec.out_channels; ++j) {
      for (std::size_t i = 0; i < I; ++i) out.push_back({static_cast<long>(i), j, W[j * I + i]});
    }
    return out;
  }
  const bool one_d = n.kind() == LayerKind::conv1d;
  const std::size_t C = in_shape[0];
  const std::size_t H = one_d ? 1 : in_shape[1];
  const std::size_t Wd = one_d ? in_shape[1] : in_shape[2];
  const std::size_t kh = one_d ? 1 : n.spec.kernel[0], kw = n.spec.kernel[1];
  const std::size_t sh = one_d ? 1 : n.spec.stride[0], sw = n.spec.stride[1];
  const long ph = one_d ? 0 : static_cast<long>(n.spec.padding[0]), pw = static_cast<long>(n.spec.padding[1]);
  const std::size_t OH = one_d ? 1 : n.out_shape[1];
  const std::size_t OW = one_d ? n.out_shape[1] : n.out_shape[2];
  for (std::size_t o = 0; o < n.spec.out_channels; ++o) {
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        const std::size_t j = (o * OH + oh) * OW + ow;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t a = 0; a < kh; ++a) {
            for (std::size_t b = 0; b < kw; ++b) {
              const long y = static_cast<long>(oh * sh + a) - ph;
              const long x = static_cast<long>(ow * sw + b) - pw;
              const double w = W[((o * C + c) * kh + a) * kw + b];
              if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(Wd)) {
                out.push_back({-1, j, w});
              } else {
                out.push_back({static_cast<long>((c * H + y) * Wd + x), j, w});
              }
            }
          }
        }
      }
    }
  }
  return out;
}

Rule oracle_rule(const ModelGraph& g, std::size_t idx, const RuleComposite& rules) {
  const Node& n = g.node(idx);
  if (auto it = rules.overrides.find(n.id()); it != rules.overrides.end()) return it->second;
  if (n.kind() == LayerKind::dense) return rules.dense;
  if (n.kind() == LayerKind::add) return rules.add;
  if (is_conv(n.kind())) {
    for (std::size_t k = 1; k < idx; ++k) {
      if (is_conv(g.node(k).kind())) return rules.conv;
    }
    return rules.first_conv;
  }
  return Rule::passthrough;
}

}  // namespace

std::size_t count_neurons(const ModelGraph& g) {
  std::size_t n = 0;
  for (const Node& node : g.nodes()) {
    if (is_linear(node.kind())) n += shape_product(node.out_shape);
  }
  return n;
}

OracleAttribution oracle_attribute(const ActivationTrace& trace, const ConditionSet& cond, const RuleComposite& rules,
                                   const InitSpec& init, bool normalize_per_layer) {
  const ModelGraph& g = trace.graph();
  OracleAttribution out;
  out.neurons = count_neurons(g);
  if (out.neurons > 32) fail(ErrorKind::compute, "oracle limited to 32 neurons, model has " + std::to_string(out.neurons));

  const std::size_t N = g.size();
  out.relevance.resize(N);
  out.messages.resize(N);
  for (std::size_t k = 0; k < N; ++k) out.relevance[k].assign(shape_product(g.node(k).out_shape), 0.0);

  const std::size_t top = g.output_index();
  auto& r_top = out.relevance[top];
  switch (init.mode) {
    case InitSpec::Mode::logit: r_top[init.target_class] = trace.logits()[init.target_class]; break;
    case InitSpec::Mode::one_hot: r_top[init.target_class] = 1.0; break;
    case InitSpec::Mode::vector:
      for (std::size_t k = 0; k < r_top.size(); ++k) r_top[k] = init.values[k];
      break;
    case InitSpec::Mode::layer_activation: fail(ErrorKind::compute, "oracle starts at the output only");
  }

  for (std::size_t k = top + 1; k-- > 0;) {
    const Node& n = g.node(k);
    auto& R = out.relevance[k];
    if (auto it = cond.layers.find(n.id()); it != cond.layers.end()) {
      const std::size_t C = n.out_shape[0];
      const std::size_t per = R.size() / C;
      for (std::size_t e = 0; e < R.size(); ++e) {
        if (!it->second.count(e / per)) R[e] = 0.0;
      }
    }
    if (normalize_per_layer) {
      double s = 0.0;
      for (double v : R) s += std::fabs(v);
      if (s > 1e-12) {
        for (double& v : R) v /= s;
      }
    }
    if (k == 0) break;

    const std::size_t src = n.inputs[0];
    const Tensor& a = trace.at(src);
    auto& Rin = out.relevance[src];
    switch (n.kind()) {
      case LayerKind::relu:
      case LayerKind::flatten:
        for (std::size_t e = 0; e < R.size(); ++e) Rin[e] += R[e];
        break;
      case LayerKind::add: {
        const Tensor& b = trace.at(n.inputs[1]);
        auto& Rb = out.relevance[n.inputs[1]];
        const bool zp = oracle_rule(g, k, rules) == Rule::zplus;
        for (std::size_t e = 0; e < R.size(); ++e) {
          double za = a[e], zb = b[e];
          if (zp) {
            za = std::max(za, 0.0);
            zb = std::max(zb, 0.0);
            if (za + zb <= 0.0) continue;
            Rin[e] += za / (za + zb) * R[e];
            Rb[e] += zb / (za + zb) * R[e];
          } else {
            const double z = za + zb;
            const double d = z + rules.epsilon * (z >= 0 ? 1.0 : -1.0);
            Rin[e] += za / d * R[e];
            Rb[e] += zb / d * R[e];
          }
        }
        break;
      }
      case LayerKind::conv2d:
      case LayerKind::conv1d:
      case LayerKind::dense: {
        const Rule rule = oracle_rule(g, k, rules);
        const auto conns = enumerate_connections(n, a.shape());
        const std::size_t J = R.size();
        std::vector<double> zj(J, 0.0), zpos(J, 0.0), count(J, 0.0);
        for (const auto& c : conns) {
          count[c.j] += 1.0;
          if (c.i < 0) continue;
          const double zij = static_cast<double>(a[static_cast<std::size_t>(c.i)]) * c.w;
          zj[c.j] += zij;
          zpos[c.j] += std::max(zij, 0.0);
        }
        for (const auto& c : conns) {
          if (c.i < 0) continue;
          const double zij = static_cast<double>(a[static_cast<std::size_t>(c.i)]) * c.w;
          double msg = 0.0;
          switch (rule) {
            case Rule::epsilon: {
              const double d = zj[c.j] + rules.epsilon * (zj[c.j] >= 0 ? 1.0 : -1.0);
              msg = zij / d * R[c.j];
              break;
            }
            case Rule::zplus: msg = zpos[c.j] > 0 ? std::max(zij, 0.0) / zpos[c.j] * R[c.j] : 0.0; break;
            case Rule::flat: msg = R[c.j] / count[c.j]; break;
            default: fail(ErrorKind::compute, "oracle: rule not supported on linear node");
          }
          Rin[static_cast<std::size_t>(c.i)] += msg;
          out.messages[k].push_back({static_cast<std::size_t>(c.i), c.j, msg});
        }
        break;
      }
      default: fail(ErrorKind::compute, std::string("oracle: unsupported layer kind ") + to_string(n.kind()));
    }
  }
  return out;
}

}  // namespace crp
