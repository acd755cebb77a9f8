#include "crp/attribute.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "crp/detail/conv_geometry.hpp"
#include "crp/parallel.hpp"
#include "crp/simd/kernels.hpp"

namespace crp {

// ---------------------------------------------------------------------------
// ConditionSet / InitSpec
// ---------------------------------------------------------------------------

ConditionSet& ConditionSet::add(const std::string& layer, std::size_t channel) {
  layers[layer].insert(channel);
  return *this;
}

ConditionSet& ConditionSet::add(const std::string& layer, const std::vector<std::size_t>& channels) {
  auto& s = layers[layer];
  s.insert(channels.begin(), channels.end());
  return *this;
}

ConditionSet ConditionSet::with(const std::string& layer, std::set<std::size_t> channels) const {
  ConditionSet c = *this;
  c.layers[layer] = std::move(channels);
  return c;
}

std::string ConditionSet::canonical() const {
  std::string out;
  for (const auto& [layer, chans] : layers) {
    if (!out.empty()) out += ';';
    out += layer + ':';
    bool first = true;
    for (std::size_t c : chans) {
      if (!first) out += ',';
      out += std::to_string(c);
      first = false;
    }
  }
  return out;
}

void ConditionSet::parse_into(const std::string& spec) {
  const auto colon = spec.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == spec.size()) {
    fail(ErrorKind::usage, "condition '" + spec + "' must look like layer:ch[,ch...]");
  }
  const std::string layer = spec.substr(0, colon);
  std::stringstream ss(spec.substr(colon + 1));
  std::string item;
  auto& set = layers[layer];
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      fail(ErrorKind::usage, "condition '" + spec + "': bad channel '" + item + "'");
    }
    set.insert(std::stoul(item));
  }
  if (set.empty()) fail(ErrorKind::usage, "condition '" + spec + "' selects no channels");
}

InitSpec InitSpec::logit(std::size_t cls) {
  InitSpec s;
  s.mode = Mode::logit;
  s.target_class = cls;
  return s;
}

InitSpec InitSpec::one_hot(std::size_t cls) {
  InitSpec s;
  s.mode = Mode::one_hot;
  s.target_class = cls;
  return s;
}

InitSpec InitSpec::vector(Tensor64 v) {
  InitSpec s;
  s.mode = Mode::vector;
  s.values = std::move(v);
  return s;
}

InitSpec InitSpec::layer_activation(std::string layer, std::size_t channel) {
  InitSpec s;
  s.mode = Mode::layer_activation;
  s.layer = std::move(layer);
  s.channel = channel;
  return s;
}

std::string InitSpec::canonical() const {
  switch (mode) {
    case Mode::logit: return "logit:" + std::to_string(target_class);
    case Mode::one_hot: return "one_hot:" + std::to_string(target_class);
    case Mode::vector: {
      const auto bytes = reinterpret_cast<const std::uint8_t*>(values.values().data());
      return "vector:" + fingerprint(std::vector<std::uint8_t>(bytes, bytes + values.size() * sizeof(double)));
    }
    case Mode::layer_activation: return "layer:" + layer + ":" + std::to_string(channel);
  }
  return {};
}

// ---------------------------------------------------------------------------
// Rules and composites
// ---------------------------------------------------------------------------

const char* to_string(Rule r) noexcept {
  switch (r) {
    case Rule::epsilon: return "epsilon";
    case Rule::zplus: return "zplus";
    case Rule::flat: return "flat";
    case Rule::passthrough: return "passthrough";
    case Rule::winner_take_all: return "winner_take_all";
    case Rule::proportional: return "proportional";
  }
  return "?";
}

Rule rule_from_string(const std::string& s) {
  for (Rule r : {Rule::epsilon, Rule::zplus, Rule::flat, Rule::passthrough, Rule::winner_take_all, Rule::proportional}) {
    if (s == to_string(r)) return r;
  }
  if (s == "eps") return Rule::epsilon;
  if (s == "z+") return Rule::zplus;
  if (s == "wta") return Rule::winner_take_all;
  fail(ErrorKind::usage, "unknown rule '" + s + "'");
}

RuleComposite RuleComposite::epsilon_zplus_flat() { return RuleComposite{}; }

RuleComposite RuleComposite::zplus_flat() {
  RuleComposite c;
  c.dense = Rule::zplus;
  return c;
}

RuleComposite RuleComposite::uniform(Rule r) {
  RuleComposite c;
  c.first_conv = c.conv = c.dense = r;
  return c;
}

RuleComposite RuleComposite::flat_all() {
  RuleComposite c = uniform(Rule::flat);
  c.maxpool = Rule::flat;
  c.avgpool = Rule::flat;
  return c;
}

RuleComposite RuleComposite::from_name(const std::string& name) {
  if (name == "epsilon_zplus_flat" || name == "default") return epsilon_zplus_flat();
  if (name == "zplus_flat") return zplus_flat();
  if (name == "epsilon") return uniform(Rule::epsilon);
  if (name == "zplus") return uniform(Rule::zplus);
  if (name == "flat") return uniform(Rule::flat);
  fail(ErrorKind::usage, "unknown composite '" + name + "' (epsilon_zplus_flat, zplus_flat, epsilon, zplus, flat)");
}

namespace {

bool rule_allowed(LayerKind kind, Rule r) {
  switch (kind) {
    case LayerKind::conv2d:
    case LayerKind::conv1d:
    case LayerKind::dense: return r == Rule::epsilon || r == Rule::zplus || r == Rule::flat;
    case LayerKind::maxpool2d: return r == Rule::winner_take_all || r == Rule::flat;
    case LayerKind::avgpool2d:
      return r == Rule::proportional || r == Rule::zplus || r == Rule::epsilon || r == Rule::flat;
    case LayerKind::add: return r == Rule::proportional || r == Rule::zplus;
    case LayerKind::input:
    case LayerKind::relu:
    case LayerKind::flatten:
    case LayerKind::batchnorm: return r == Rule::passthrough;
  }
  return false;
}

}  // namespace

std::vector<Rule> RuleComposite::resolve(const ModelGraph& g) const {
  if (!g.canonized()) fail(ErrorKind::compute, "attribution needs a canonized graph (fold batchnorm first)");
  for (const auto& [id, r] : overrides) {
    if (!g.find(id)) fail(ErrorKind::not_found, "rule override for unknown layer '" + id + "'");
  }
  std::vector<Rule> out(g.size(), Rule::passthrough);
  bool seen_conv = false;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Node& n = g.node(i);
    Rule r = Rule::passthrough;
    switch (n.kind()) {
      case LayerKind::conv2d:
      case LayerKind::conv1d:
        r = seen_conv ? conv : first_conv;
        seen_conv = true;
        break;
      case LayerKind::dense: r = dense; break;
      case LayerKind::maxpool2d: r = maxpool; break;
      case LayerKind::avgpool2d: r = avgpool; break;
      case LayerKind::add: r = add; break;
      default: break;
    }
    if (auto it = overrides.find(n.id()); it != overrides.end()) r = it->second;
    if (!rule_allowed(n.kind(), r)) {
      fail(ErrorKind::usage, std::string("rule ") + to_string(r) + " does not apply to " + to_string(n.kind()) +
                                 " layer '" + n.id() + "'");
    }
    if (r == Rule::epsilon && !(epsilon > 0.0)) fail(ErrorKind::usage, "epsilon must be > 0");
    out[i] = r;
  }
  return out;
}

std::string RuleComposite::canonical() const {
  std::ostringstream os;
  os << std::setprecision(17) << "eps=" << epsilon << ";first_conv=" << to_string(first_conv)
     << ";conv=" << to_string(conv) << ";dense=" << to_string(dense) << ";maxpool=" << to_string(maxpool)
     << ";avgpool=" << to_string(avgpool) << ";add=" << to_string(add);
  for (const auto& [id, r] : overrides) os << ";" << id << "=" << to_string(r);
  return os.str();
}

// ---------------------------------------------------------------------------
// Linear operators: z = W a and the transposed product used by every rule
// ---------------------------------------------------------------------------

namespace {

class LinearOp {
 public:
  LinearOp(const Node& node, const Shape& in_shape) : node_(node), in_size_(shape_product(in_shape)) {
    conv_ = is_conv(node.kind());
    K_ = node.linear.fan_in();
    out_ch_ = node.spec.out_channels;
    if (conv_) {
      geom_ = detail::WindowGeometry::from(node, in_shape);
      P_ = geom_.positions();
    } else {
      P_ = 1;
      if (in_size_ != K_) fail(ErrorKind::shape, "layer '" + node.id() + "': input size does not match fan-in");
    }
  }

  std::size_t out_size() const { return out_ch_ * P_; }
  std::size_t fan_in() const { return K_; }

  /// w == nullptr means all-ones weights.
  std::vector<double> apply(const std::vector<double>* w, const std::vector<double>& x) const {
    const auto& t = simd::active();
    std::vector<double> z(out_size(), 0.0);
    if (conv_) {
      std::vector<double> cols(K_ * P_);
      detail::im2col(x.data(), geom_, cols.data());
      for (std::size_t o = 0; o < out_ch_; ++o) {
        double* zo = z.data() + o * P_;
        for (std::size_t k = 0; k < K_; ++k) t.axpy(w ? (*w)[o * K_ + k] : 1.0, cols.data() + k * P_, zo, P_);
      }
    } else {
      const double total = w ? 0.0 : t.sum(x.data(), K_);
      for (std::size_t o = 0; o < out_ch_; ++o) z[o] = w ? t.dot(w->data() + o * K_, x.data(), K_) : total;
    }
    return z;
  }

  /// c_i = sum_j w_ij s_j
  std::vector<double> transpose(const std::vector<double>* w, const std::vector<double>& s) const {
    const auto& t = simd::active();
    std::vector<double> c(in_size_, 0.0);
    if (conv_) {
      std::vector<double> dcols(K_ * P_, 0.0);
      for (std::size_t o = 0; o < out_ch_; ++o) {
        const double* so = s.data() + o * P_;
        for (std::size_t k = 0; k < K_; ++k) t.axpy(w ? (*w)[o * K_ + k] : 1.0, so, dcols.data() + k * P_, P_);
      }
      detail::col2im(dcols.data(), geom_, c.data());
    } else if (w) {
      for (std::size_t o = 0; o < out_ch_; ++o) {
        if (s[o] != 0.0) t.axpy(s[o], w->data() + o * K_, c.data(), K_);
      }
    } else {
      const double total = t.sum(s.data(), out_ch_);
      std::fill(c.begin(), c.end(), total);
    }
    return c;
  }

 private:
  const Node& node_;
  bool conv_ = false;
  std::size_t in_size_ = 0, K_ = 0, P_ = 1, out_ch_ = 0;
  detail::WindowGeometry geom_;
};

std::vector<double> as_double(const Tensor& x) { return std::vector<double>(x.data().begin(), x.data().end()); }

Tensor64 to_tensor(const Shape& shape, std::vector<double> v) { return Tensor64(shape, std::move(v)); }

void check_rout(const PreActivationDecomposition& dec, const Tensor64& r_out) {
  if (r_out.size() != dec.num_outputs()) {
    fail(ErrorKind::shape, "layer '" + dec.node().id() + "': relevance size " + std::to_string(r_out.size()) +
                               " does not match output size " + std::to_string(dec.num_outputs()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// PreActivationDecomposition
// ---------------------------------------------------------------------------

PreActivationDecomposition::PreActivationDecomposition(const Node& node, const Tensor& input)
    : node_(&node), input_(&input) {
  if (!is_linear(node.kind())) fail(ErrorKind::compute, "layer '" + node.id() + "' is not conv/dense");
}

std::size_t PreActivationDecomposition::num_outputs() const { return shape_product(node_->out_shape); }

double PreActivationDecomposition::contribution(std::size_t i, std::size_t j) const {
  const Node& n = *node_;
  const double a = (*input_)[i];
  const std::size_t K = n.linear.fan_in();
  if (n.kind() == LayerKind::dense) return a * n.linear.w[j * K + i];
  const auto g = detail::WindowGeometry::from(n, input_->shape());
  const std::size_t P = g.positions();
  const std::size_t o = j / P, p = j % P;
  const std::size_t oh = p / g.out_w, ow = p % g.out_w;
  const std::size_t c = i / g.plane(), ih = (i % g.plane()) / g.width, iw = i % g.width;
  const long ki = static_cast<long>(ih + g.ph) - static_cast<long>(oh * g.sh);
  const long kj = static_cast<long>(iw + g.pw) - static_cast<long>(ow * g.sw);
  if (ki < 0 || kj < 0 || ki >= static_cast<long>(g.kh) || kj >= static_cast<long>(g.kw)) return 0.0;
  return a * n.linear.w[o * K + (c * g.kh + static_cast<std::size_t>(ki)) * g.kw + static_cast<std::size_t>(kj)];
}

Tensor64 PreActivationDecomposition::aggregate() const {
  LinearOp op(*node_, input_->shape());
  return to_tensor(node_->out_shape, op.apply(&node_->linear.w, as_double(*input_)));
}

Tensor64 PreActivationDecomposition::aggregate_positive() const {
  LinearOp op(*node_, input_->shape());
  std::vector<double> ap(input_->size()), an(input_->size());
  for (std::size_t i = 0; i < ap.size(); ++i) {
    const double a = (*input_)[i];
    ap[i] = a > 0 ? a : 0.0;
    an[i] = a < 0 ? a : 0.0;
  }
  auto z = op.apply(&node_->linear.w_pos, ap);
  const auto zn = op.apply(&node_->linear.w_neg, an);
  for (std::size_t j = 0; j < z.size(); ++j) z[j] += zn[j];
  return to_tensor(node_->out_shape, std::move(z));
}

std::size_t PreActivationDecomposition::connections_per_output() const { return node_->linear.fan_in(); }

Tensor64 rule_epsilon(const PreActivationDecomposition& dec, const Tensor64& r_out, double epsilon) {
  check_rout(dec, r_out);
  const Node& n = dec.node();
  LinearOp op(n, dec.input().shape());
  const auto a = as_double(dec.input());
  const auto z = op.apply(&n.linear.w, a);
  std::vector<double> s(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double denom = z[j] + epsilon * (z[j] >= 0.0 ? 1.0 : -1.0);
    s[j] = denom != 0.0 ? r_out[j] / denom : 0.0;
  }
  auto c = op.transpose(&n.linear.w, s);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= a[i];
  return to_tensor(dec.input().shape(), std::move(c));
}

Tensor64 rule_zplus(const PreActivationDecomposition& dec, const Tensor64& r_out) {
  check_rout(dec, r_out);
  const Node& n = dec.node();
  LinearOp op(n, dec.input().shape());
  const std::size_t N = dec.num_inputs();
  std::vector<double> ap(N), an(N);
  for (std::size_t i = 0; i < N; ++i) {
    const double a = dec.input()[i];
    ap[i] = a > 0 ? a : 0.0;
    an[i] = a < 0 ? a : 0.0;
  }
  // (a w)^+ = a^+ w^+ + a^- w^-
  auto z = op.apply(&n.linear.w_pos, ap);
  const auto zn = op.apply(&n.linear.w_neg, an);
  std::vector<double> s(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double d = z[j] + zn[j];
    s[j] = d > 0.0 ? r_out[j] / d : 0.0;
  }
  const auto cp = op.transpose(&n.linear.w_pos, s);
  const auto cn = op.transpose(&n.linear.w_neg, s);
  std::vector<double> r(N);
  for (std::size_t i = 0; i < N; ++i) r[i] = ap[i] * cp[i] + an[i] * cn[i];
  return to_tensor(dec.input().shape(), std::move(r));
}

Tensor64 rule_flat(const PreActivationDecomposition& dec, const Tensor64& r_out) {
  check_rout(dec, r_out);
  LinearOp op(dec.node(), dec.input().shape());
  const double inv = 1.0 / static_cast<double>(op.fan_in());
  std::vector<double> s(r_out.data().begin(), r_out.data().end());
  for (double& v : s) v *= inv;
  return to_tensor(dec.input().shape(), op.transpose(nullptr, s));
}

// ---------------------------------------------------------------------------
// Non-linear node rules
// ---------------------------------------------------------------------------

namespace {

template <typename Fn>
void for_each_window(const detail::WindowGeometry& g, Fn&& fn) {
  std::vector<long> taps;
  taps.reserve(g.kh * g.kw);
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        taps.clear();
        for (std::size_t i = 0; i < g.kh; ++i) {
          const long ih = static_cast<long>(oh * g.sh + i) - static_cast<long>(g.ph);
          for (std::size_t j = 0; j < g.kw; ++j) {
            const long iw = static_cast<long>(ow * g.sw + j) - static_cast<long>(g.pw);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.height) && iw < static_cast<long>(g.width);
            taps.push_back(inside ? static_cast<long>((c * g.height + ih) * g.width + iw) : -1);
          }
        }
        fn((c * g.out_h + oh) * g.out_w + ow, taps);
      }
    }
  }
}

void pool_backward(const Node& n, Rule rule, double epsilon, const Tensor& a, const Tensor64& r_out,
                   const std::vector<std::uint32_t>& argmax, Tensor64& r_in) {
  if (n.kind() == LayerKind::maxpool2d && rule == Rule::winner_take_all) {
    for (std::size_t o = 0; o < r_out.size(); ++o) r_in[argmax[o]] += r_out[o];
    return;
  }
  const auto g = detail::WindowGeometry::from(n, a.shape());
  const double inv_n = 1.0 / static_cast<double>(g.kh * g.kw);
  for_each_window(g, [&](std::size_t o, const std::vector<long>& taps) {
    const double R = r_out[o];
    if (R == 0.0) return;
    switch (rule) {
      case Rule::flat:
        for (long t : taps) {
          if (t >= 0) r_in[static_cast<std::size_t>(t)] += R * inv_n;
        }
        break;
      case Rule::proportional:
      case Rule::zplus: {
        double d = 0.0;
        for (long t : taps) {
          if (t >= 0 && a[static_cast<std::size_t>(t)] > 0) d += a[static_cast<std::size_t>(t)];
        }
        if (d <= 0.0) break;
        for (long t : taps) {
          if (t >= 0 && a[static_cast<std::size_t>(t)] > 0) r_in[static_cast<std::size_t>(t)] += a[static_cast<std::size_t>(t)] / d * R;
        }
        break;
      }
      case Rule::epsilon: {
        double z = 0.0;
        for (long t : taps) {
          if (t >= 0) z += a[static_cast<std::size_t>(t)] * inv_n;
        }
        const double s = R / (z + epsilon * (z >= 0.0 ? 1.0 : -1.0));
        for (long t : taps) {
          if (t >= 0) r_in[static_cast<std::size_t>(t)] += a[static_cast<std::size_t>(t)] * inv_n * s;
        }
        break;
      }
      default: fail(ErrorKind::compute, "unsupported pooling rule on '" + n.id() + "'");
    }
  });
}

void add_backward(Rule rule, double epsilon, const Tensor& a, const Tensor& b, const Tensor64& r_out, Tensor64& ra,
                  Tensor64& rb) {
  for (std::size_t i = 0; i < r_out.size(); ++i) {
    const double R = r_out[i];
    if (R == 0.0) continue;
    double za = a[i], zb = b[i];
    double denom;
    if (rule == Rule::zplus) {
      za = za > 0 ? za : 0.0;
      zb = zb > 0 ? zb : 0.0;
      denom = za + zb;
      if (denom <= 0.0) continue;
    } else {
      const double z = za + zb;
      denom = z + epsilon * (z >= 0.0 ? 1.0 : -1.0);
    }
    ra[i] += za / denom * R;
    rb[i] += zb / denom * R;
  }
}

void accumulate(Tensor64& dst, const Tensor64& src) {
  simd::active().axpy(1.0, src.values().data(), dst.data().data(), dst.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// RelevanceTrace
// ---------------------------------------------------------------------------

RelevanceTrace::RelevanceTrace(const ModelGraph& graph, std::vector<Tensor64> relevance, std::size_t start)
    : graph_(&graph), relevance_(std::move(relevance)), start_(start) {}

Tensor64 RelevanceTrace::input_map() const {
  const Tensor64& r = input();
  return r.rank() == 3 ? sum_channels(r) : r;
}

double RelevanceTrace::layer_sum(std::size_t node) const { return sum(relevance_.at(node)); }

std::vector<double> RelevanceTrace::channel_relevance(const std::string& layer) const {
  return channel_reduce(at(layer), SpatialReduce::sum);
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

RelevanceTrace propagate(const ActivationTrace& trace, std::size_t start_node, Tensor64 start_relevance,
                         const ConditionSet& cond, const std::vector<Rule>& rules, double epsilon,
                         bool normalize_per_layer) {
  const ModelGraph& g = trace.graph();
  if (rules.size() != g.size()) fail(ErrorKind::compute, "rule table does not match the graph");
  if (start_node >= g.size()) fail(ErrorKind::not_found, "start node out of range");
  if (start_relevance.shape() != g.node(start_node).out_shape) {
    fail(ErrorKind::shape, "initial relevance " + shape_to_string(start_relevance.shape()) + " does not match layer '" +
                               g.node(start_node).id() + "' " + shape_to_string(g.node(start_node).out_shape));
  }

  std::vector<const std::set<std::size_t>*> masks(g.size(), nullptr);
  for (const auto& [layer, chans] : cond.layers) {
    const auto idx = g.find(layer);
    if (!idx) fail(ErrorKind::not_found, "condition on unknown layer '" + layer + "'");
    const std::size_t C = g.node(*idx).out_shape[0];
    for (std::size_t c : chans) {
      if (c >= C) {
        fail(ErrorKind::invalid_condition, "condition on '" + layer + "': channel " + std::to_string(c) +
                                               " out of range (layer has " + std::to_string(C) + ")");
      }
    }
    if (!g.is_ancestor(*idx, start_node)) {
      fail(ErrorKind::invalid_condition, "condition unreachable: layer '" + layer + "' does not lie below '" +
                                             g.node(start_node).id() + "'");
    }
    masks[*idx] = &chans;
  }

  std::vector<Tensor64> R;
  R.reserve(g.size());
  for (const Node& n : g.nodes()) R.emplace_back(n.out_shape, 0.0);
  std::vector<char> reached(g.size(), 0);
  R[start_node] = std::move(start_relevance);
  reached[start_node] = 1;

  const auto& kt = simd::active();
  for (std::size_t step = start_node + 1; step-- > 0;) {
    const std::size_t i = step;
    if (!reached[i]) continue;
    Tensor64& r = R[i];
    if (masks[i]) {
      const std::size_t C = r.channels();
      for (std::size_t c = 0; c < C; ++c) {
        if (!masks[i]->count(c)) {
          auto ch = r.channel(c);
          std::fill(ch.begin(), ch.end(), 0.0);
        }
      }
    }
    if (normalize_per_layer) {
      const double total = kt.sum_abs(r.values().data(), r.size());
      if (total > 1e-12) {
        for (double& v : r.data()) v /= total;
      }
    }
    if (i == 0) break;

    const Node& n = g.node(i);
    const std::size_t in0 = n.inputs[0];
    const Tensor& a = trace.at(in0);
    try {
      switch (n.kind()) {
        case LayerKind::conv2d:
        case LayerKind::conv1d:
        case LayerKind::dense: {
          PreActivationDecomposition dec(n, a);
          Tensor64 rin;
          switch (rules[i]) {
            case Rule::epsilon: rin = rule_epsilon(dec, r, epsilon); break;
            case Rule::zplus: rin = rule_zplus(dec, r); break;
            case Rule::flat: rin = rule_flat(dec, r); break;
            default: fail(ErrorKind::compute, "invalid rule for linear layer");
          }
          accumulate(R[in0], rin);
          break;
        }
        case LayerKind::relu:
        case LayerKind::flatten:
        case LayerKind::batchnorm:
          kt.axpy(1.0, r.values().data(), R[in0].data().data(), r.size());
          break;
        case LayerKind::maxpool2d:
        case LayerKind::avgpool2d:
          pool_backward(n, rules[i], epsilon, a, r, trace.argmax(i), R[in0]);
          break;
        case LayerKind::add: {
          const std::size_t in1 = n.inputs[1];
          if (in0 == in1) {
            Tensor64 tmp(R[in0].shape(), 0.0);
            add_backward(rules[i], epsilon, a, a, r, R[in0], tmp);
            accumulate(R[in0], tmp);
          } else {
            add_backward(rules[i], epsilon, a, trace.at(in1), r, R[in0], R[in1]);
          }
          reached[in1] = 1;
          break;
        }
        case LayerKind::input: break;
      }
    } catch (const Error& e) {
      fail(e.kind(), "backward through '" + n.id() + "': " + e.what());
    }
    reached[in0] = 1;
  }
  return RelevanceTrace(g, std::move(R), start_node);
}

RelevanceTrace attribute(const ActivationTrace& trace, const ConditionSet& cond, const InitSpec& init,
                         const RuleComposite& rules, bool normalize_per_layer) {
  const ModelGraph& g = trace.graph();
  const auto table = rules.resolve(g);
  const std::size_t out = g.output_index();
  const std::size_t n_out = g.num_outputs();
  std::size_t start = out;
  Tensor64 r0;
  switch (init.mode) {
    case InitSpec::Mode::logit:
    case InitSpec::Mode::one_hot:
      if (init.target_class >= n_out) {
        fail(ErrorKind::not_found, "class " + std::to_string(init.target_class) + " out of range (model has " +
                                       std::to_string(n_out) + " outputs)");
      }
      r0 = Tensor64({n_out}, 0.0);
      r0[init.target_class] = init.mode == InitSpec::Mode::logit ? trace.logits()[init.target_class] : 1.0;
      break;
    case InitSpec::Mode::vector:
      if (init.values.shape() != Shape{n_out}) {
        fail(ErrorKind::shape, "init vector must have shape (" + std::to_string(n_out) + ")");
      }
      r0 = init.values;
      break;
    case InitSpec::Mode::layer_activation: {
      const auto idx = g.find(init.layer);
      if (!idx) fail(ErrorKind::not_found, "init layer '" + init.layer + "' not found");
      start = *idx;
      const Tensor& act = trace.at(start);
      if (init.channel >= act.channels()) {
        fail(ErrorKind::not_found, "init channel " + std::to_string(init.channel) + " out of range for '" + init.layer + "'");
      }
      r0 = Tensor64(act.shape(), 0.0);
      auto src = act.channel(init.channel);
      auto dst = r0.channel(init.channel);
      std::copy(src.begin(), src.end(), dst.begin());
      break;
    }
  }
  return propagate(trace, start, std::move(r0), cond, table, rules.epsilon, normalize_per_layer);
}

// ---------------------------------------------------------------------------
// Channel flow between adjacent analyzed layers
// ---------------------------------------------------------------------------

ChannelFlow decompose_channel_flow(const ActivationTrace& trace, const ConditionSet& cond, const InitSpec& init,
                                   const RuleComposite& rules, const std::string& upper, const std::string& lower) {
  const ModelGraph& g = trace.graph();
  const auto up = g.find(upper);
  const auto lo = g.find(lower);
  if (!up) fail(ErrorKind::not_found, "unknown layer '" + upper + "'");
  if (!lo) fail(ErrorKind::not_found, "unknown layer '" + lower + "'");
  if (*lo >= *up || !g.is_ancestor(*lo, *up)) {
    fail(ErrorKind::usage, "layer '" + lower + "' does not precede '" + upper + "'");
  }
  for (std::size_t k = *lo + 1; k < *up; ++k) {
    if (is_linear(g.node(k).kind()) && g.is_ancestor(*lo, k) && g.is_ancestor(k, *up)) {
      fail(ErrorKind::usage, "layers '" + lower + "' and '" + upper + "' are not adjacent: '" + g.node(k).id() +
                                 "' lies between them");
    }
  }

  ChannelFlow flow;
  flow.upper = upper;
  flow.lower = lower;
  const std::size_t C_up = g.node(*up).out_shape[0];
  if (auto it = cond.layers.find(upper); it != cond.layers.end()) {
    flow.upper_channels.assign(it->second.begin(), it->second.end());
  } else {
    for (std::size_t c = 0; c < C_up; ++c) flow.upper_channels.push_back(c);
  }
  const std::size_t C_lo = g.node(*lo).out_shape[0];
  const std::size_t n = flow.upper_channels.size();
  std::vector<std::vector<double>> cols(n);
  parallel_for(n, default_workers(), [&](std::size_t k) {
    const auto rt = attribute(trace, cond.with(upper, {flow.upper_channels[k]}), init, rules);
    cols[k] = rt.channel_relevance(lower);
  });
  flow.matrix = Tensor64({C_lo, std::max<std::size_t>(n, 1)}, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < C_lo; ++i) flow.matrix[i * n + k] = cols[k][i];
  }
  return flow;
}

}  // namespace crp
