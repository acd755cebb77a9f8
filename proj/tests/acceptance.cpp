// One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>

#include "crp/concepts.hpp"
#include "crp/evaluate.hpp"
#include "crp/fixtures.hpp"
#include "crp/graphs.hpp"
#include "crp/localize.hpp"
#include "crp/model_io.hpp"
#include "oracles.hpp"

using namespace crp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double max_gap_to_oracle(const ActivationTrace& trace, const ConditionSet& cond, const RuleComposite& rules,
                         const InitSpec& init) {
  const auto engine = attribute(trace, cond, init, rules);
  const auto oracle = oracle_attribute(trace, cond, rules, init);
  double worst = 0.0;
  for (std::size_t k = 0; k < engine.size(); ++k) {
    for (std::size_t i = 0; i < oracle.relevance[k].size(); ++i) {
      worst = std::max(worst, std::fabs(engine.at(k)[i] - oracle.relevance[k][i]));
    }
  }
  return worst;
}

Outcome oracle_equivalence() {
  const std::vector<RuleComposite> rules = {RuleComposite::uniform(Rule::epsilon), RuleComposite::uniform(Rule::zplus),
                                            RuleComposite::uniform(Rule::flat)};
  double worst = 0.0;
  std::size_t runs = 0;
  for (const char* name : {"mlp8", "resnet_micro"}) {
    const auto f = make_fixture(name);
    FixtureRng rng(7);
    const std::size_t outputs = f.model.num_outputs();
    for (const auto& r : rules) {
      for (std::size_t t = 0; t < 20; ++t) {
        const auto trace = forward(f.model, f.data.sample(t % f.data.size()));
        ConditionSet cond;
        for (const Node& n : f.model.nodes()) {
          if (n.kind() == LayerKind::input || rng.below(2)) continue;
          const std::size_t C = n.out_shape[0];
          std::vector<std::size_t> chans;
          for (std::size_t c = 0; c < C; ++c) {
            if (rng.below(2)) chans.push_back(c);
          }
          if (chans.empty()) chans.push_back(rng.below(C));
          cond.add(n.id(), chans);
        }
        worst = std::max(worst, max_gap_to_oracle(trace, cond, r, InitSpec::one_hot(rng.below(outputs))));
        worst = std::max(worst, max_gap_to_oracle(trace, {}, r, InitSpec::logit(rng.below(outputs))));
        runs += 2;
      }
    }
  }
  return {worst < 1e-9, std::to_string(runs) + " attributions, max |engine - oracle| = " + fmt("%.3g", worst) + " (< 1e-9)"};
}

Outcome conservation() {
  const auto f = make_fixture("lenet_random");
  double worst_composite = 0.0, worst_pure = 0.0;
  FixtureRng rng(11);
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto trace = forward(f.model, random_tensor({1, 32, 32}, 500 + s, 0.0, 1.0));
    const auto init = InitSpec::one_hot(rng.below(10));
    const auto a = attribute(trace, {}, init, RuleComposite::epsilon_zplus_flat());
    const auto b = attribute(trace, {}, init, RuleComposite::zplus_flat());
    worst_composite = std::max(worst_composite, std::fabs(a.layer_sum(0) - 1.0));
    worst_pure = std::max(worst_pure, std::fabs(b.layer_sum(0) - 1.0));
  }
  return {worst_composite < 1e-4 && worst_pure < 1e-5,
          "50 inputs, composite max |sum - 1| = " + fmt("%.3g", worst_composite) + " (< 1e-4), z+/flat max = " +
              fmt("%.3g", worst_pure) + " (< 1e-5)"};
}

Outcome channel_partition() {
  const auto f = make_fixture("lenet_random");
  const RuleComposite rules;
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto trace = forward(f.model, random_tensor({1, 32, 32}, 900 + s, 0.0, 1.0));
    const auto init = InitSpec::logit(trace.predicted_class());
    const auto full = attribute(trace, {}, init, rules).input_map();
    double scale = 0.0;
    for (double v : full.data()) scale = std::max(scale, std::fabs(v));
    for (const char* layer : {"conv1", "conv2"}) {
      std::vector<double> acc(full.size(), 0.0);
      const std::size_t C = f.model.node(layer).out_shape[0];
      for (std::size_t c = 0; c < C; ++c) {
        ConditionSet cond;
        cond.add(layer, c);
        const auto part = attribute(trace, cond, init, rules).input_map();
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += part[i];
      }
      for (std::size_t i = 0; i < acc.size(); ++i) worst = std::max(worst, std::fabs(acc[i] - full[i]) / scale);
    }
  }
  return {worst < 1e-5, "20 inputs x {conv1, conv2}, max deviation / max|heatmap| = " + fmt("%.3g", worst) + " (< 1e-5)"};
}

Outcome atlas_consistency() {
  const auto f = make_fixture("lenet_random");
  double worst = 0.0;
  for (std::size_t s = 0; s < 5; ++s) {
    const auto trace = forward(f.model, f.data.sample(s));
    const auto init = InitSpec::logit(trace.predicted_class());
    for (const char* layer : {"conv1", "conv2"}) {
      const auto atlas = build_atlas(trace, {}, init, RuleComposite{}, layer, grid_partition(32, 32, 4, 4), 5, true, 4);
      double scale = 0.0;
      for (double g : atlas.global) scale = std::max(scale, std::fabs(g));
      for (std::size_t c = 0; c < atlas.channels; ++c) {
        double acc = 0.0;
        for (double v : atlas.aggregates[c]) acc += v;
        const double denom = std::max(std::fabs(atlas.global[c]), 1e-3 * scale);
        worst = std::max(worst, std::fabs(acc - atlas.global[c]) / denom);
      }
    }
  }
  return {worst < 1e-5, "5 samples x {conv1, conv2} on a 4x4 grid, max relative deviation = " + fmt("%.3g", worst) +
                            " (< 1e-5)"};
}

Outcome receptive_fields() {
  FixtureRng rng(2024);
  const std::size_t kernels[] = {1, 3, 5};
  std::size_t architectures = 0, neurons = 0, mismatches = 0;
  while (architectures < 25) {
    std::vector<ConvStage> stages(1 + rng.below(4));
    for (auto& s : stages) s = {kernels[rng.below(3)], 1 + rng.below(2), rng.below(2)};
    const std::size_t H = 9 + rng.below(12), W = 9 + rng.below(12);
    bool valid = true;
    std::size_t h = H, w = W;
    for (const auto& s : stages) {
      if (h + 2 * s.padding < s.kernel || w + 2 * s.padding < s.kernel) valid = false;
      if (!valid) break;
      h = (h + 2 * s.padding - s.kernel) / s.stride + 1;
      w = (w + 2 * s.padding - s.kernel) / s.stride + 1;
    }
    if (!valid) continue;
    ++architectures;
    const auto g = make_conv_stack(H, W, stages, architectures);
    const std::string last = "conv" + std::to_string(stages.size());
    for (std::size_t p = 0; p < h; ++p) {
      for (std::size_t q = 0; q < w; ++q) {
        ++neurons;
        const auto rf = receptive_field(g, last, std::vector<std::size_t>{0, p, q});
        if (rf.mask != oracle::field_mask(H, W, stages, p, q)) ++mismatches;
      }
    }
  }
  return {mismatches == 0, std::to_string(architectures) + " architectures, " + std::to_string(neurons) +
                               " neurons, " + std::to_string(mismatches) + " fields differ from the analytic set"};
}

Outcome graph_conservation() {
  const auto f = make_fixture("lenet_random");
  const auto rules = RuleComposite::zplus_flat();
  double worst = 0.0;
  std::size_t nodes = 0;
  for (std::size_t s = 0; s < 10; ++s) {
    const auto trace = forward(f.model, f.data.sample(s));
    const auto init = InitSpec::logit(trace.predicted_class());
    const auto fc2 = attribute(trace, {}, init, rules).channel_relevance("fc2");
    const auto root = static_cast<std::size_t>(std::max_element(fc2.begin(), fc2.end()) - fc2.begin());
    const auto g = build_graph(trace, {}, init, rules, "fc2", root, {{"fc1", "conv2", "conv1"}, 3, false, 4});
    for (const auto& n : g.nodes) {
      if (n.child_flows.empty() || n.relevance == 0.0) continue;
      double total = 0.0;
      for (double v : n.child_flows) total += v;
      worst = std::max(worst, std::fabs(total - n.relevance) / std::fabs(n.relevance));
      ++nodes;
    }
  }
  return {worst < 1e-5 && nodes > 0, std::to_string(nodes) + " expanded nodes, max relative |sum(child flows) - R| = " +
                                         fmt("%.3g", worst) + " (< 1e-5)"};
}

Outcome flip_fixture() {
  const auto f = make_fixture("singlepath");
  RankingSpec spec;
  spec.cond.add("fc", 0);
  spec.init = InitSpec::logit(0);
  bool ok = true;
  double worst_floor = 0.0, worst_flat = 0.0;
  for (std::size_t s = 0; s < f.data.size(); ++s) {
    const Tensor& x = f.data.sample(s);
    const double base = forward(f.model, x).logits()[0];
    const auto desc = flip_filters(f.model, x, "conv1", 0, spec, FlipOrder::relevance_desc, 3);
    ok = ok && desc.ranking.front() == 0;
    worst_floor = std::max(worst_floor, std::fabs(desc.steps[1].logits[0] - 0.1));
    ok = ok && std::fabs(desc.steps[1].relative[0] - 0.1 / base) < 1e-6;
    const auto asc = flip_filters(f.model, x, "conv1", 0, spec, FlipOrder::relevance_asc, 3);
    for (std::size_t t = 1; t + 1 < asc.steps.size(); ++t) {
      worst_flat = std::max(worst_flat, std::fabs(asc.steps[t].relative[0] - 1.0));
    }
    ok = ok && std::fabs(asc.steps.back().logits[0] - 0.1) < 1e-6;
  }
  ok = ok && worst_floor < 1e-6 && worst_flat < 1e-6;
  return {ok, "4 samples, |logit at step 1 - bias 0.1| <= " + fmt("%.3g", worst_floor) +
                  ", ascending max |relative - 1| before the last step = " + fmt("%.3g", worst_flat) + " (< 1e-6)"};
}

bool same_bytes(const fs::path& a, const fs::path& b) { return read_file_bytes(a) == read_file_bytes(b); }

Outcome index_determinism() {
  const auto f = make_fixture("lenet_random");
  IndexOptions opts;
  opts.layers = {"conv1", "conv2", "fc1"};
  for (const char* t : {"act_sum", "act_max", "rel_sum", "rel_max"}) opts.targets.push_back(MaximizationTarget::parse(t));
  opts.k = 40;
  const auto root = fs::temp_directory_path() / ("crp_acceptance_" + std::to_string(::getpid()));
  opts.workers = 1;
  const auto one = build_index(f.model, f.data, opts);
  opts.workers = 8;
  const auto eight = build_index(f.model, f.data, opts);
  one.save(root / "w1");
  eight.save(root / "w8");
  const bool identical = same_bytes(root / "w1/index.crpw", root / "w8/index.crpw") &&
                         same_bytes(root / "w1/index.json", root / "w8/index.json");
  fs::remove_all(root);

  double worst = 0.0;
  for (std::size_t s = 0; s < f.data.size(); ++s) {
    const auto trace = forward(f.model, f.data.sample(s));
    const auto y = static_cast<std::size_t>((*f.data.labels)[s]);
    ConditionSet cond;
    cond.add("fc3", y);
    const auto rt = attribute(trace, cond, InitSpec::logit(y), RuleComposite{});
    for (const auto& l : opts.layers) {
      const std::pair<const char*, std::vector<double>> expected[] = {
          {"act_sum", channel_reduce(trace.at(l), SpatialReduce::sum)},
          {"act_max", channel_reduce(trace.at(l), SpatialReduce::max)},
          {"rel_sum", channel_reduce(rt.at(l), SpatialReduce::sum)},
          {"rel_max", channel_reduce(rt.at(l), SpatialReduce::max)}};
      for (const auto& [target, values] : expected) {
        const auto& m = one.matrix(l, target);
        for (std::size_t c = 0; c < values.size(); ++c) {
          worst = std::max(worst, std::fabs(m[s * values.size() + c] - values[c]) / std::max(1.0, std::fabs(values[c])));
        }
      }
    }
  }
  return {identical && worst < 1e-6, std::string("200 samples, 1 vs 8 workers ") +
                                         (identical ? "byte-identical" : "DIFFER") +
                                         ", max recomputation deviation = " + fmt("%.3g", worst) + " (< 1e-6)"};
}

Outcome similarity() {
  const auto f = make_fixture("singlepath");
  IndexOptions opts;
  opts.layers = {"conv1"};
  opts.targets = {MaximizationTarget::parse("rel_sum")};
  opts.k = 4;
  const auto idx = build_index(f.model, f.data, opts);
  constexpr std::size_t C = 3, HW = 4;
  double worst = 0.0;
  bool ok = true;
  for (std::size_t k = 1; k <= 3; ++k) {
    const auto m = channel_similarity(f.model, f.data, idx, "conv1", k);
    double cosine[C][C] = {};
    for (std::size_t q = 0; q < C; ++q) {
      const auto refs = idx.rank("conv1", q, "rel_sum");
      for (std::size_t r = 0; r < k; ++r) {
        const auto z = forward(f.model, f.data.sample(refs[r].sample)).at("relu1");
        for (std::size_t p = 0; p < C; ++p) {
          double dot = 0, nq = 0, np = 0;
          for (std::size_t i = 0; i < HW; ++i) {
            dot += double(z[q * HW + i]) * z[p * HW + i];
            nq += double(z[q * HW + i]) * z[q * HW + i];
            np += double(z[p * HW + i]) * z[p * HW + i];
          }
          if (nq > 0 && np > 0) cosine[q][p] += dot / std::sqrt(nq * np) / double(k);
        }
      }
    }
    for (std::size_t q = 0; q < C; ++q) {
      for (std::size_t p = 0; p < C; ++p) {
        const double rho = m.rho[q * C + p];
        worst = std::max(worst, std::fabs(rho - 0.5 * (cosine[q][p] + cosine[p][q])));
        ok = ok && rho == m.rho[p * C + q] && rho >= 0.0 && rho <= 1.0 + 1e-12;
      }
      if (!m.flagged[q]) ok = ok && std::fabs(m.rho[q * C + q] - 1.0) < 1e-6;
    }
  }
  return {ok && worst < 1e-6, "3-channel toy, k = 1..3, max |rho - loop oracle| = " + fmt("%.3g", worst) +
                                  (ok ? ", symmetric, in [0,1], unit diagonal" : ", PROPERTY VIOLATED")};
}

Outcome blend_identities() {
  const auto f = make_fixture("lenet_random");
  bool bit_identical = true;
  double worst = 0.0;
  for (std::size_t s = 0; s < 10; ++s) {
    const Tensor& x = f.data.sample(s);
    const auto clean = forward(f.model, x);
    RankingSpec spec;
    spec.init = InitSpec::logit(clean.predicted_class());
    for (const char* layer : {"conv1", "conv2"}) {
      const auto& shape = f.model.node(layer).out_shape;
      const BoolMask all({shape[1], shape[2]}, true);
      const auto donor = forward(f.model, f.data.sample(s + 10)).at(layer);
      const auto other = blend_sweep(f.model, x, ActivationEdit::blend_with(layer, all, donor, 0.0), {0.0}, {}, spec);
      const auto self = blend_sweep(f.model, x, ActivationEdit::blend_with(layer, all, clean.at(layer), 0.0), {1.0}, {}, spec);
      for (std::size_t c = 0; c < 10; ++c) {
        bit_identical = bit_identical && other.points[0].logits[c] == static_cast<double>(clean.logits()[c]);
        worst = std::max(worst, std::fabs(self.points[0].logits[c] - clean.logits()[c]));
      }
    }
  }
  return {bit_identical && worst < 1e-6, std::string("10 samples x {conv1, conv2}, alpha=0 ") +
                                             (bit_identical ? "bit-identical" : "DIFFERS") +
                                             ", alpha=1 self-donor max |delta logit| = " + fmt("%.3g", worst) + " (< 1e-6)"};
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  return v[static_cast<std::size_t>(std::ceil(q * double(v.size()))) - 1];
}

Outcome runtime() {
  using clock = std::chrono::steady_clock;
  const auto f = make_fixture("lenet_random");
  const RuleComposite rules;
  std::vector<double> ms;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto t0 = clock::now();
    const auto trace = forward(f.model, f.data.sample(i));
    ConditionSet cond;
    cond.add("conv2", i % 16);
    const auto map = attribute(trace, cond, InitSpec::logit(trace.predicted_class()), rules).input_map();
    ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
    if (map.size() != 32 * 32) return {false, "unexpected heatmap size"};
  }
  const double p95 = percentile(ms, 0.95);

  const auto trace = forward(f.model, f.data.sample(0));
  const auto t0 = clock::now();
  const auto atlas = build_atlas(trace, {}, InitSpec::logit(trace.predicted_class()), rules, "conv2",
                                 grid_partition(32, 32, 4, 4), 16, true, 1);
  const double atlas_s = std::chrono::duration<double>(clock::now() - t0).count();
  return {p95 < 50.0 && atlas_s < 2.0 && atlas.regions.size() == 16,
          "attribution p95 = " + fmt("%.2f", p95) + " ms (< 50 ms, 200 runs, 1 thread); 16-region atlas over 16 conv2 "
          "channels = " + fmt("%.3f", atlas_s) + " s (< 2 s, 1 thread)"};
}

Outcome canonization() {
  const auto f = make_fixture("conv_bn");
  const ModelGraph folded = canonize(f.model);
  const Shape& shape = f.model.input_shape();
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Tensor x = random_tensor(shape, 3000 + s, -1.0, 1.0);
    const auto a = forward(f.model, x).logits();
    const auto b = forward(folded, x).logits();
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(double(a[i]) - b[i]));
  }
  return {worst < 1e-5, "100 inputs, max |forward - folded forward| = " + fmt("%.3g", worst) + " (< 1e-5)"};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"oracle_equivalence", oracle_equivalence},
      {"conservation", conservation},
      {"channel_partition", channel_partition},
      {"atlas_consistency", atlas_consistency},
      {"receptive_fields", receptive_fields},
      {"graph_conservation", graph_conservation},
      {"flip_fixture", flip_fixture},
      {"index_determinism", index_determinism},
      {"similarity_matrix", similarity},
      {"blend_identities", blend_identities},
      {"runtime", runtime},
      {"canonization", canonization},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s %-20s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  std::printf("%d/%zu criteria passed\n", int(std::size(criteria)) - failures, std::size(criteria));
  return failures == 0 ? 0 : 1;
}
