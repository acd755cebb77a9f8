#include "crp/concepts.hpp"

#include <algorithm>
#include <json.hpp>

#include "crp/parallel.hpp"

namespace crp {

using json = nlohmann::json;

std::string MaximizationTarget::name() const {
  const char* agg = aggregation == SpatialReduce::sum ? "sum" : "max";
  return std::string(basis == TargetBasis::activation ? "act_" : "rel_") + agg;
}

MaximizationTarget MaximizationTarget::parse(const std::string& name) {
  MaximizationTarget t;
  if (name == "act_sum" || name == "act_max") {
    t.basis = TargetBasis::activation;
  } else if (name == "rel_sum" || name == "rel_max") {
    t.basis = TargetBasis::relevance;
  } else {
    fail(ErrorKind::usage, "unknown target '" + name + "' (act_sum, act_max, rel_sum, rel_max)");
  }
  t.aggregation = name.substr(4) == "sum" ? SpatialReduce::sum : SpatialReduce::max;
  return t;
}

std::string ReferenceIndex::key(const std::string& layer, const std::string& target, long cls) {
  std::string k = "scores/" + layer + "/" + target;
  if (cls >= 0) k += "/" + std::to_string(cls);
  return k;
}

bool ReferenceIndex::has(const std::string& layer, const std::string& target, long cls) const {
  return scores.count(key(layer, target, cls)) != 0;
}

const Tensor64& ReferenceIndex::matrix(const std::string& layer, const std::string& target, long cls) const {
  auto it = scores.find(key(layer, target, cls));
  if (it == scores.end()) {
    std::string avail;
    for (const auto& [k, v] : scores) avail += (avail.empty() ? "" : ", ") + k.substr(7);
    fail(ErrorKind::not_found, "index has no entry for layer '" + layer + "', target '" + target + "'" +
                                   (cls >= 0 ? ", class " + std::to_string(cls) : std::string()) +
                                   "; available: " + (avail.empty() ? "none" : avail));
  }
  return it->second;
}

std::size_t ReferenceIndex::channels(const std::string& layer) const {
  for (const auto& t : targets) {
    if (has(layer, t)) return matrix(layer, t).extent(1);
  }
  fail(ErrorKind::not_found, "layer '" + layer + "' is not indexed");
}

std::vector<RankEntry> ReferenceIndex::rank(const std::string& layer, std::size_t channel, const std::string& target,
                                            long cls) const {
  const Tensor64& m = matrix(layer, target, cls);
  const std::size_t C = m.extent(1);
  if (channel >= C) {
    fail(ErrorKind::not_found, "channel " + std::to_string(channel) + " out of range for '" + layer + "' (" +
                                   std::to_string(C) + " channels)");
  }
  const bool rel = target.rfind("rel_", 0) == 0;
  std::vector<RankEntry> out(m.extent(0));
  for (std::size_t s = 0; s < out.size(); ++s) {
    out[s] = {s, m[s * C + channel], rel ? (cls >= 0 ? cls : sample_classes.at(s)) : -1};
  }
  std::sort(out.begin(), out.end(), [](const RankEntry& a, const RankEntry& b) {
    return a.score != b.score ? a.score > b.score : a.sample < b.sample;
  });
  return out;
}

void ReferenceIndex::check_fingerprints(const std::string& model_fp, const std::string& data_fp) const {
  if (model_fp != model_fingerprint) {
    fail(ErrorKind::fingerprint, "index was built for model " + model_fingerprint + ", loaded model is " + model_fp);
  }
  if (data_fp != dataset_fingerprint) {
    fail(ErrorKind::fingerprint, "index was built for dataset " + dataset_fingerprint + ", loaded dataset is " + data_fp);
  }
}

std::string ReferenceIndex::rankings_json() const {
  json j;
  j["format"] = "crp-index";
  j["version"] = 1;
  j["model_fingerprint"] = model_fingerprint;
  j["dataset_fingerprint"] = dataset_fingerprint;
  j["k"] = k;
  j["samples"] = samples;
  j["classes"] = num_classes;
  j["class_conditional"] = class_conditional;
  j["layers"] = layers;
  j["targets"] = targets;
  j["rules"] = rules;
  j["sample_classes"] = sample_classes;
  json rankings = json::array();
  for (const auto& [name, m] : scores) {
    // name = scores/<layer>/<target>[/<class>]
    const std::string rest = name.substr(7);
    const auto p1 = rest.find('/');
    const auto p2 = rest.find('/', p1 + 1);
    const std::string layer = rest.substr(0, p1);
    const std::string target = rest.substr(p1 + 1, p2 == std::string::npos ? std::string::npos : p2 - p1 - 1);
    const long cls = p2 == std::string::npos ? -1 : std::stol(rest.substr(p2 + 1));
    json r;
    r["layer"] = layer;
    r["target"] = target;
    r["class"] = cls >= 0 ? json(cls) : json(nullptr);
    json chans = json::array();
    for (std::size_t c = 0; c < m.extent(1); ++c) {
      auto entries = rank(layer, c, target, cls);
      entries.resize(std::min(entries.size(), k));
      json list = json::array();
      for (const auto& e : entries) list.push_back(json::array({e.sample, e.score}));
      chans.push_back(std::move(list));
    }
    r["channels"] = std::move(chans);
    rankings.push_back(std::move(r));
  }
  j["rankings"] = std::move(rankings);
  return j.dump(2) + "\n";
}

void ReferenceIndex::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  Blob b;
  for (const auto& [name, m] : scores) b.add(name, m);
  write_blob(dir / "index.crpw", b);
  write_text_file(dir / "index.json", rankings_json());
}

ReferenceIndex ReferenceIndex::load(const std::filesystem::path& dir) {
  const auto bytes = read_file_bytes(dir / "index.json");
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    fail(ErrorKind::format, (dir / "index.json").string() + ": " + e.what());
  }
  if (j.value("format", "") != "crp-index" || j.value("version", 0) != 1) {
    fail(ErrorKind::format, (dir / "index.json").string() + ": not a crp-index v1 document");
  }
  ReferenceIndex idx;
  try {
    idx.model_fingerprint = j.at("model_fingerprint").get<std::string>();
    idx.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    idx.k = j.at("k").get<std::size_t>();
    idx.samples = j.at("samples").get<std::size_t>();
    idx.num_classes = j.at("classes").get<std::size_t>();
    idx.class_conditional = j.at("class_conditional").get<bool>();
    idx.layers = j.at("layers").get<std::vector<std::string>>();
    idx.targets = j.at("targets").get<std::vector<std::string>>();
    idx.rules = j.at("rules").get<std::string>();
    idx.sample_classes = j.at("sample_classes").get<std::vector<long>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::format, (dir / "index.json").string() + ": " + e.what());
  }
  const Blob b = read_blob(dir / "index.crpw");
  for (const auto& e : b.entries()) {
    const auto* m = std::get_if<Tensor64>(&e.tensor);
    if (!m || m->rank() != 2 || m->extent(0) != idx.samples) {
      fail(ErrorKind::format, "index.crpw: tensor " + e.name + " is not a (samples, channels) f64 matrix");
    }
    idx.scores[e.name] = *m;
  }
  return idx;
}

std::vector<double> channel_scores(const ActivationTrace& trace, const std::string& layer,
                                   const MaximizationTarget& target, std::size_t cls) {
  if (target.basis == TargetBasis::activation) {
    const Tensor& a = trace.at(layer);
    if (!target.rectify) return channel_reduce(a, target.aggregation);
    Tensor r = a;
    for (auto& v : r.data()) v = v > 0.0f ? v : 0.0f;
    return channel_reduce(r, target.aggregation);
  }
  ConditionSet cond = target.base;
  const std::string& out = trace.graph().output().id();
  if (!cond.layers.count(out)) cond.add(out, cls);
  const auto rt = attribute(trace, cond, InitSpec::logit(cls), target.rules, target.normalize_per_layer);
  return channel_reduce(rt.at(layer), target.aggregation);
}

std::size_t conditioning_class(const MaximizationTarget& target, const ActivationTrace& trace,
                               const std::optional<std::vector<std::int32_t>>& labels, std::size_t sample) {
  switch (target.class_source) {
    case ClassSource::fixed: return target.fixed_class;
    case ClassSource::label:
      if (labels) return static_cast<std::size_t>(labels->at(sample));
      return trace.predicted_class();
    case ClassSource::predicted: return trace.predicted_class();
  }
  return 0;
}

ReferenceIndex build_index(const ModelGraph& g, const DatasetContainer& data, const IndexOptions& opts) {
  if (opts.k < 1) fail(ErrorKind::usage, "k must be at least 1");
  if (opts.layers.empty()) fail(ErrorKind::usage, "no layers to index");
  if (opts.targets.empty()) fail(ErrorKind::usage, "no targets to index");
  data.validate_against(g);
  for (const auto& l : opts.layers) {
    if (!g.find(l)) fail(ErrorKind::not_found, "unknown layer '" + l + "'");
    if (g.node(l).kind() == LayerKind::input) fail(ErrorKind::usage, "cannot index the input layer");
  }
  for (const auto& t : opts.targets) {
    if (t.basis == TargetBasis::relevance) {
      t.rules.resolve(g);
      if (t.class_source == ClassSource::fixed && t.fixed_class >= g.num_outputs()) {
        fail(ErrorKind::usage, "fixed class out of range");
      }
    }
  }
  std::vector<std::string> names;
  for (const auto& t : opts.targets) {
    if (std::find(names.begin(), names.end(), t.name()) != names.end()) {
      fail(ErrorKind::usage, "target " + t.name() + " listed twice");
    }
    names.push_back(t.name());
  }

  ReferenceIndex idx;
  idx.model_fingerprint = g.fingerprint();
  idx.dataset_fingerprint = data.fingerprint();
  idx.k = opts.k;
  idx.samples = data.size();
  idx.num_classes = g.num_outputs();
  idx.class_conditional = opts.class_conditional;
  idx.layers = opts.layers;
  idx.targets = names;
  for (const auto& t : opts.targets) {
    if (t.basis == TargetBasis::relevance) {
      idx.rules = t.rules.canonical() + (t.normalize_per_layer ? ";normalized" : "");
      break;
    }
  }
  idx.sample_classes.assign(data.size(), -1);

  const std::size_t N = data.size();
  const std::size_t n_cls = g.num_outputs();
  // allocate every matrix up front; workers write disjoint rows
  for (const auto& l : opts.layers) {
    const std::size_t C = g.node(l).out_shape[0];
    for (const auto& t : opts.targets) {
      idx.scores.emplace(ReferenceIndex::key(l, t.name()), Tensor64({N, C}, 0.0));
      if (opts.class_conditional && t.basis == TargetBasis::relevance) {
        for (std::size_t y = 0; y < n_cls; ++y) {
          idx.scores.emplace(ReferenceIndex::key(l, t.name(), static_cast<long>(y)), Tensor64({N, C}, 0.0));
        }
      }
    }
  }

  auto write_row = [&](const std::string& key, std::size_t s, const std::vector<double>& row) {
    Tensor64& m = idx.scores.at(key);
    std::copy(row.begin(), row.end(), m.data().begin() + static_cast<std::ptrdiff_t>(s * m.extent(1)));
  };

  parallel_for(N, opts.workers, [&](std::size_t s) {
    const auto trace = forward(g, data.sample(s));
    for (const auto& t : opts.targets) {
      if (t.basis == TargetBasis::activation) {
        for (const auto& l : opts.layers) write_row(ReferenceIndex::key(l, t.name()), s, channel_scores(trace, l, t, 0));
        continue;
      }
      auto relevance_rows = [&](std::size_t cls, long key_cls) {
        ConditionSet cond = t.base;
        const std::string& out = g.output().id();
        if (!cond.layers.count(out)) cond.add(out, cls);
        const auto rt = attribute(trace, cond, InitSpec::logit(cls), t.rules, t.normalize_per_layer);
        for (const auto& l : opts.layers) {
          write_row(ReferenceIndex::key(l, t.name(), key_cls), s, channel_reduce(rt.at(l), t.aggregation));
        }
      };
      const std::size_t cls = conditioning_class(t, trace, data.labels, s);
      idx.sample_classes[s] = static_cast<long>(cls);
      relevance_rows(cls, -1);
      if (opts.class_conditional) {
        for (std::size_t y = 0; y < n_cls; ++y) relevance_rows(y, static_cast<long>(y));
      }
    }
  });
  if (std::all_of(opts.targets.begin(), opts.targets.end(),
                  [](const MaximizationTarget& t) { return t.basis == TargetBasis::activation; })) {
    // no relevance target: record labels (or nothing) so class filters still work
    for (std::size_t s = 0; s < N; ++s) {
      idx.sample_classes[s] = data.labels ? static_cast<long>((*data.labels)[s]) : -1;
    }
  }
  for (const auto& [name, m] : idx.scores) check_finite(m, name);
  return idx;
}

ReferenceRanking query_references(const ReferenceIndex& idx, const std::string& layer, std::size_t channel,
                                  const std::string& target, std::optional<std::size_t> class_filter, std::size_t k) {
  if (std::find(idx.layers.begin(), idx.layers.end(), layer) == idx.layers.end()) {
    fail(ErrorKind::not_found, "layer '" + layer + "' is not indexed");
  }
  if (k > idx.k) fail(ErrorKind::usage, "k=" + std::to_string(k) + " exceeds stored depth " + std::to_string(idx.k));
  ReferenceRanking r;
  r.layer = layer;
  r.channel = channel;
  r.target = target;
  r.class_filter = class_filter;
  const long cls = class_filter ? static_cast<long>(*class_filter) : -1;
  if (class_filter && *class_filter >= idx.num_classes) {
    fail(ErrorKind::not_found, "class " + std::to_string(*class_filter) + " out of range");
  }
  if (class_filter && idx.has(layer, target, cls)) {
    r.entries = idx.rank(layer, channel, target, cls);
  } else {
    r.entries = idx.rank(layer, channel, target);
    if (class_filter) {
      std::erase_if(r.entries, [&](const RankEntry& e) { return idx.sample_classes.at(e.sample) != cls; });
    }
  }
  if (r.entries.size() > k) r.entries.resize(k);
  return r;
}

std::vector<ClassRelevance> rank_classes_for_concept(const ModelGraph& g, const DatasetContainer& data,
                                                     const std::string& layer, std::size_t channel,
                                                     const RuleComposite& rules, std::size_t workers) {
  data.validate_against(g);
  const auto idx = g.find(layer);
  if (!idx) fail(ErrorKind::not_found, "unknown layer '" + layer + "'");
  if (channel >= g.node(*idx).out_shape[0]) fail(ErrorKind::not_found, "channel out of range");
  const std::size_t n_cls = g.num_outputs();
  if (n_cls == 0) fail(ErrorKind::usage, "model has no classes");
  const std::size_t N = data.size();
  std::vector<double> per(N * n_cls, 0.0);
  parallel_for(N, workers, [&](std::size_t s) {
    const auto trace = forward(g, data.sample(s));
    for (std::size_t y = 0; y < n_cls; ++y) {
      ConditionSet cond;
      cond.add(g.output().id(), y);
      const auto rt = attribute(trace, cond, InitSpec::logit(y), rules);
      per[s * n_cls + y] = channel_reduce(rt.at(*idx), SpatialReduce::sum)[channel];
    }
  });
  std::vector<ClassRelevance> out(n_cls);
  for (std::size_t y = 0; y < n_cls; ++y) {
    double acc = 0.0;
    for (std::size_t s = 0; s < N; ++s) acc += per[s * n_cls + y];
    out[y] = {y, acc / static_cast<double>(N)};
  }
  std::stable_sort(out.begin(), out.end(), [](const ClassRelevance& a, const ClassRelevance& b) { return a.mean > b.mean; });
  return out;
}

}  // namespace crp
