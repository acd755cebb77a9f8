#include "crp/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "crp/fixtures.hpp"
#include "crp/parallel.hpp"

namespace crp {

FlipOrder flip_order_from_string(const std::string& s) {
  if (s == "desc" || s == "relevance_desc") return FlipOrder::relevance_desc;
  if (s == "asc" || s == "relevance_asc") return FlipOrder::relevance_asc;
  if (s == "random") return FlipOrder::random;
  fail(ErrorKind::usage, "unknown flip order '" + s + "' (desc, asc, random)");
}

const char* to_string(FlipOrder o) noexcept {
  switch (o) {
    case FlipOrder::relevance_desc: return "relevance_desc";
    case FlipOrder::relevance_asc: return "relevance_asc";
    case FlipOrder::random: return "random";
  }
  return "?";
}

namespace {

std::vector<double> to_doubles(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::vector<double> softmax(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += p[i] = std::exp(z[i] - m);
  for (auto& v : p) v /= total;
  return p;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

FlipCurve flip_filters(const ModelGraph& g, const Tensor& x, const std::string& layer, std::size_t target_class,
                       const RankingSpec& ranking, FlipOrder order, std::size_t max_steps, std::uint64_t seed) {
  const auto idx = g.find(layer);
  if (!idx) fail(ErrorKind::not_found, "unknown layer '" + layer + "'");
  const std::size_t C = g.node(*idx).out_shape[0];
  if (max_steps > C) {
    fail(ErrorKind::usage, "max_steps " + std::to_string(max_steps) + " exceeds " + std::to_string(C) + " channels");
  }
  if (target_class >= g.num_outputs()) fail(ErrorKind::not_found, "class out of range");

  FlipCurve curve;
  curve.layer = layer;
  curve.order = order;
  curve.seed = seed;
  curve.target_class = target_class;

  const auto clean = forward(g, x);
  curve.channel_relevance = attribute(clean, ranking.cond, ranking.init, ranking.rules).channel_relevance(layer);
  const auto& rel = curve.channel_relevance;
  curve.ranking.resize(C);
  std::iota(curve.ranking.begin(), curve.ranking.end(), 0);
  if (order == FlipOrder::random) {
    FixtureRng rng(seed);
    for (std::size_t i = C; i > 1; --i) std::swap(curve.ranking[i - 1], curve.ranking[rng.below(i)]);
  } else {
    std::stable_sort(curve.ranking.begin(), curve.ranking.end(), [&](std::size_t a, std::size_t b) {
      return order == FlipOrder::relevance_desc ? rel[a] > rel[b] : rel[a] < rel[b];
    });
  }

  const auto base_logits = to_doubles(clean.logits());
  const auto base_soft = softmax(base_logits);
  curve.absolute.resize(base_logits.size());
  for (std::size_t c = 0; c < base_logits.size(); ++c) curve.absolute[c] = base_logits[c] == 0.0;

  auto record = [&](FlipStep& step, const Tensor& logits) {
    step.logits = to_doubles(logits);
    step.softmax = softmax(step.logits);
    step.relative.resize(step.logits.size());
    step.softmax_relative.resize(step.logits.size());
    for (std::size_t c = 0; c < step.logits.size(); ++c) {
      step.relative[c] = curve.absolute[c] ? step.logits[c] : step.logits[c] / base_logits[c];
      step.softmax_relative[c] = step.softmax[c] / base_soft[c];
    }
  };

  FlipStep first;
  record(first, clean.logits());
  curve.steps.push_back(std::move(first));
  for (std::size_t t = 1; t <= max_steps; ++t) {
    FlipStep step;
    step.channel = static_cast<long>(curve.ranking[t - 1]);
    step.disabled.assign(curve.ranking.begin(), curve.ranking.begin() + static_cast<std::ptrdiff_t>(t));
    const auto edited = forward(g, x, {ActivationEdit::zero(layer, step.disabled)});
    record(step, edited.logits());
    curve.steps.push_back(std::move(step));
  }
  return curve;
}

std::string FlipCurve::to_csv() const {
  std::ostringstream os;
  const std::size_t n = steps.empty() ? 0 : steps.front().logits.size();
  os << "step,channel";
  for (std::size_t c = 0; c < n; ++c) os << ",relative_" << c;
  for (std::size_t c = 0; c < n; ++c) os << ",softmax_relative_" << c;
  os << "\n";
  for (std::size_t t = 0; t < steps.size(); ++t) {
    os << t << "," << (steps[t].channel >= 0 ? std::to_string(steps[t].channel) : "");
    for (double v : steps[t].relative) os << "," << fmt(v);
    for (double v : steps[t].softmax_relative) os << "," << fmt(v);
    os << "\n";
  }
  return os.str();
}

BlendSweep blend_sweep(const ModelGraph& g, const Tensor& x, const ActivationEdit& edit_template,
                       const std::vector<double>& alphas,
                       const std::vector<std::pair<std::string, std::size_t>>& tracked, const RankingSpec& relevance,
                       std::size_t workers) {
  if (alphas.empty()) fail(ErrorKind::usage, "no alpha values");
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (!(alphas[i] >= 0.0 && alphas[i] <= 1.0)) fail(ErrorKind::usage, "alpha values must lie in [0, 1]");
    if (i > 0 && alphas[i] <= alphas[i - 1]) fail(ErrorKind::usage, "alpha values must be strictly ascending");
  }
  if (edit_template.mode == ActivationEdit::Mode::zero_channels) {
    fail(ErrorKind::usage, "blend sweeps need a blend or blend_mean edit");
  }
  for (const auto& [layer, ch] : tracked) {
    const auto idx = g.find(layer);
    if (!idx) fail(ErrorKind::not_found, "unknown layer '" + layer + "'");
    if (ch >= g.node(*idx).out_shape[0]) fail(ErrorKind::not_found, "channel out of range for '" + layer + "'");
  }
  // surfaces donor/mask shape errors before the sweep starts
  forward(g, x, {edit_template});

  BlendSweep sweep;
  sweep.edit = edit_template;
  sweep.tracked = tracked;
  sweep.points.resize(alphas.size());
  parallel_for(alphas.size(), workers, [&](std::size_t i) {
    ActivationEdit edit = edit_template;
    edit.alpha = alphas[i];
    const auto trace = forward(g, x, {edit});
    BlendPoint& p = sweep.points[i];
    p.alpha = alphas[i];
    p.logits = to_doubles(trace.logits());
    if (!tracked.empty()) {
      const auto rt = attribute(trace, relevance.cond, relevance.init, relevance.rules);
      for (const auto& [layer, ch] : tracked) p.tracked.push_back(rt.channel_relevance(layer)[ch]);
    }
  });
  return sweep;
}

std::string BlendSweep::to_csv() const {
  std::ostringstream os;
  os << "alpha";
  const std::size_t n = points.empty() ? 0 : points.front().logits.size();
  for (std::size_t c = 0; c < n; ++c) os << ",logit_" << c;
  for (const auto& [layer, ch] : tracked) os << ",relevance_" << layer << ":" << ch;
  os << "\n";
  for (const auto& p : points) {
    os << fmt(p.alpha);
    for (double v : p.logits) os << "," << fmt(v);
    for (double v : p.tracked) os << "," << fmt(v);
    os << "\n";
  }
  return os.str();
}

SimilarityMatrix channel_similarity(const ModelGraph& g, const DatasetContainer& data, const ReferenceIndex& idx,
                                    const std::string& layer, std::size_t k, const std::string& target,
                                    std::size_t workers) {
  idx.check_fingerprints(g.fingerprint(), data.fingerprint());
  if (k < 1) fail(ErrorKind::usage, "k must be at least 1");
  const std::size_t C = g.node(layer).out_shape[0];
  if (idx.channels(layer) != C) fail(ErrorKind::format, "index channel count does not match layer '" + layer + "'");

  SimilarityMatrix m;
  m.layer = layer;
  m.channels = C;
  m.k = k;
  m.target = target;
  m.flagged.assign(C, false);
  Tensor64 cosine({C, C}, 0.0);  // row q: averaged over q's references
  std::vector<char> flagged(C, 0);
  parallel_for(C, workers, [&](std::size_t q) {
    const auto refs = query_references(idx, layer, q, target, std::nullopt, k);
    for (const auto& e : refs.entries) {
      const auto trace = forward(g, data.sample(e.sample));
      const Tensor& z = trace.at(layer);
      const std::size_t n = z.size() / C;
      auto rect = [&](std::size_t c, std::size_t i) { return std::max(0.0, static_cast<double>(z[c * n + i])); };
      double qq = 0.0;
      for (std::size_t i = 0; i < n; ++i) qq += rect(q, i) * rect(q, i);
      if (qq == 0.0) flagged[q] = 1;
      for (std::size_t p = 0; p < C; ++p) {
        double qp = 0.0, pp = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          qp += rect(q, i) * rect(p, i);
          pp += rect(p, i) * rect(p, i);
        }
        if (qq > 0.0 && pp > 0.0) cosine[q * C + p] += qp / (std::sqrt(qq) * std::sqrt(pp));
      }
    }
    for (std::size_t p = 0; p < C; ++p) cosine[q * C + p] /= static_cast<double>(k);
  });
  m.rho = Tensor64({C, C}, 0.0);
  m.distance = Tensor64({C, C}, 0.0);
  for (std::size_t q = 0; q < C; ++q) {
    m.flagged[q] = flagged[q] != 0;
    for (std::size_t p = 0; p < C; ++p) {
      m.rho[q * C + p] = 0.5 * (cosine[q * C + p] + cosine[p * C + q]);
      m.distance[q * C + p] = 1.0 - m.rho[q * C + p];
    }
  }
  return m;
}

std::string SimilarityMatrix::to_csv(bool distances) const {
  const Tensor64& t = distances ? distance : rho;
  std::ostringstream os;
  os << "channel";
  for (std::size_t p = 0; p < channels; ++p) os << "," << p;
  os << "\n";
  for (std::size_t q = 0; q < channels; ++q) {
    os << q;
    for (std::size_t p = 0; p < channels; ++p) os << "," << fmt(t[q * channels + p]);
    os << "\n";
  }
  return os.str();
}

}  // namespace crp
