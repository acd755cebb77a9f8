#include "crp/service.hpp"

#include <algorithm>
#include <cmath>

#include "crp/evaluate.hpp"
#include "crp/graphs.hpp"
#include "crp/image.hpp"
#include "crp/localize.hpp"

namespace crp {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

std::optional<std::string> ResponseCache::get(const std::string& key) {
  std::lock_guard lock(mutex_);
  auto it = lookup_.find(key);
  if (it == lookup_.end()) return std::nullopt;
  order_.splice(order_.begin(), order_, it->second);
  ++hits_;
  return it->second->second;
}

void ResponseCache::put(const std::string& key, std::string value) {
  if (capacity_ == 0) return;
  std::lock_guard lock(mutex_);
  auto it = lookup_.find(key);
  if (it != lookup_.end()) {
    it->second->second = std::move(value);
    order_.splice(order_.begin(), order_, it->second);
    return;
  }
  order_.emplace_front(key, std::move(value));
  lookup_[key] = order_.begin();
  if (order_.size() > capacity_) {
    lookup_.erase(order_.back().first);
    order_.pop_back();
  }
}

std::size_t ResponseCache::size() const {
  std::lock_guard lock(mutex_);
  return order_.size();
}

std::size_t ResponseCache::hits() const {
  std::lock_guard lock(mutex_);
  return hits_;
}

// ---------------------------------------------------------------------------
// Request parsing
// ---------------------------------------------------------------------------

namespace {

std::vector<double> to_doubles(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::size_t sample_id(const Session& s, const json& req, const char* key = "sample") {
  if (!req.contains(key)) fail(ErrorKind::usage, std::string("missing '") + key + "'");
  const auto& v = req.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) fail(ErrorKind::usage, std::string("'") + key + "' must be a sample id");
  const auto id = v.get<std::size_t>();
  if (id >= s.data.size()) {
    fail(ErrorKind::not_found, "sample " + std::to_string(id) + " out of range (" + std::to_string(s.data.size()) + " samples)");
  }
  return id;
}

std::size_t class_of(const Session& s, const json& req, const ActivationTrace& trace) {
  if (!req.contains("class") || req.at("class").is_null()) return trace.predicted_class();
  const auto cls = req.at("class").get<long long>();
  if (cls < 0 || static_cast<std::size_t>(cls) >= s.model.num_outputs()) {
    fail(ErrorKind::not_found, "class " + std::to_string(cls) + " out of range");
  }
  return static_cast<std::size_t>(cls);
}

std::string layer_of(const Session& s, const json& req) {
  if (!req.contains("layer")) fail(ErrorKind::usage, "missing 'layer'");
  const auto layer = req.at("layer").get<std::string>();
  if (!s.model.find(layer)) fail(ErrorKind::not_found, "unknown layer '" + layer + "'");
  return layer;
}

ConditionSet conditions_of(const json& req) {
  ConditionSet cond;
  if (!req.contains("conditions") || req.at("conditions").is_null()) return cond;
  const auto& c = req.at("conditions");
  if (c.is_array()) {
    for (const auto& item : c) cond.parse_into(item.get<std::string>());
  } else if (c.is_object()) {
    for (const auto& [layer, chans] : c.items()) cond.add(layer, chans.get<std::vector<std::size_t>>());
  } else if (c.is_string()) {
    cond.parse_into(c.get<std::string>());
  } else {
    fail(ErrorKind::usage, "'conditions' must be a list of \"layer:c,c\" strings or an object");
  }
  return cond;
}

RuleComposite rules_of(const Session& s, const json& req) {
  if (!req.contains("rules") || req.at("rules").is_null()) return s.rules;
  const auto& r = req.at("rules");
  if (r.is_string()) return RuleComposite::from_name(r.get<std::string>());
  if (!r.is_object()) fail(ErrorKind::usage, "'rules' must be a composite name or an object");
  RuleComposite out = r.contains("composite") ? RuleComposite::from_name(r.at("composite").get<std::string>()) : s.rules;
  if (r.contains("epsilon")) out.epsilon = r.at("epsilon").get<double>();
  if (r.contains("overrides")) {
    for (const auto& [layer, rule] : r.at("overrides").items()) out.overrides[layer] = rule_from_string(rule.get<std::string>());
  }
  return out;
}

bool flag_of(const json& req, const char* key, bool fallback) {
  return req.contains(key) && !req.at(key).is_null() ? req.at(key).get<bool>() : fallback;
}

std::size_t count_of(const json& req, const char* key, std::size_t fallback) {
  if (!req.contains(key) || req.at(key).is_null()) return fallback;
  const auto v = req.at(key).get<long long>();
  if (v < 0) fail(ErrorKind::usage, std::string("'") + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

std::pair<std::size_t, std::size_t> input_extent(const Shape& s) {
  if (s.size() == 3) return {s[1], s[2]};
  if (s.size() == 2) return {1, s[1]};
  return {1, s[0]};
}

// Region given as {"rect": {top,left,height,width}} or {"mask": [0/1 ...]} over (H, W).
std::vector<std::uint8_t> region_of(const json& req, std::size_t H, std::size_t W) {
  if (req.contains("mask")) {
    auto m = req.at("mask").get<std::vector<int>>();
    if (m.size() != H * W) {
      fail(ErrorKind::shape, "mask has " + std::to_string(m.size()) + " entries, expected " + std::to_string(H * W));
    }
    std::vector<std::uint8_t> out(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] != 0;
    return out;
  }
  if (req.contains("rect")) {
    const auto& r = req.at("rect");
    const auto top = r.at("top").get<std::size_t>(), left = r.at("left").get<std::size_t>();
    const auto h = r.at("height").get<std::size_t>(), w = r.at("width").get<std::size_t>();
    if (h == 0 || w == 0 || top + h > H || left + w > W) fail(ErrorKind::usage, "rect outside the input");
    std::vector<std::uint8_t> out(H * W, 0);
    for (std::size_t y = top; y < top + h; ++y) {
      for (std::size_t x = left; x < left + w; ++x) out[y * W + x] = 1;
    }
    return out;
  }
  return std::vector<std::uint8_t>(H * W, 1);
}

std::pair<std::string, std::size_t> layer_channel(const std::string& spec) {
  const auto colon = spec.rfind(':');
  if (colon == std::string::npos) fail(ErrorKind::usage, "expected layer:channel, got '" + spec + "'");
  try {
    return {spec.substr(0, colon), static_cast<std::size_t>(std::stoul(spec.substr(colon + 1)))};
  } catch (const std::exception&) {
    fail(ErrorKind::usage, "expected layer:channel, got '" + spec + "'");
  }
}

json ranking_json(const std::vector<ChannelScore>& scores) {
  json a = json::array();
  for (const auto& s : scores) a.push_back({{"channel", s.channel}, {"relevance", s.relevance}, {"share", s.share}});
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// Endpoints
// ---------------------------------------------------------------------------

Service::Service(Session session, std::size_t cache_entries) : session_(std::move(session)), cache_(cache_entries) {
  session_.data.validate_against(session_.model);
  session_.rules.resolve(session_.model);
}

std::vector<std::uint8_t> Service::heatmap_blob(const Tensor64& map) {
  Blob b;
  b.add("heatmap", map);
  return encode_blob(b);
}

json Service::predict(const json& req) const {
  const auto id = sample_id(session_, req);
  const auto trace = forward(session_.model, session_.data.sample(id));
  const auto logits = to_doubles(trace.logits());
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - m);
  for (auto& v : p) v /= total;
  json doc = {{"sample", id}, {"logits", logits}, {"softmax", p}, {"predicted", trace.predicted_class()}};
  if (session_.data.labels) doc["label"] = (*session_.data.labels)[id];
  return doc;
}

json Service::attribute(const json& req) const {
  const auto id = sample_id(session_, req);
  const auto trace = forward(session_.model, session_.data.sample(id));
  const auto cls = class_of(session_, req, trace);
  const auto cond = conditions_of(req);
  const auto rules = rules_of(session_, req);
  const bool normalize = flag_of(req, "normalize", session_.normalize);
  const auto init = InitSpec::logit(cls);
  const auto rt = crp::attribute(trace, cond, init, rules, normalize);

  const auto [H, W] = input_extent(session_.model.input_shape());
  const Tensor64 map = rt.input_map().reshaped(Shape{H, W});
  json layers = json::array();
  for (std::size_t i = 1; i < session_.model.size(); ++i) {
    const Node& n = session_.model.node(i);
    layers.push_back({{"id", n.id()},
                      {"kind", to_string(n.kind())},
                      {"sum", rt.layer_sum(i)},
                      {"channels", channel_reduce(rt.at(i), SpatialReduce::sum)}});
  }
  return {{"sample", id},
          {"class", cls},
          {"init", init.canonical()},
          {"condition", cond.canonical()},
          {"rules", rules.canonical()},
          {"normalize", normalize},
          {"logits", to_doubles(trace.logits())},
          {"input_sum", rt.layer_sum(0)},
          {"heatmap",
           {{"shape", {H, W}},
            {"values", std::vector<double>(map.data().begin(), map.data().end())},
            {"crpw", base64_encode(heatmap_blob(map))},
            {"png", base64_encode(encode_png(heatmap_image(map)))}}},
          {"layers", std::move(layers)}};
}

json Service::concepts(const std::string& layer, const json& req) const {
  if (!session_.model.find(layer)) fail(ErrorKind::not_found, "unknown layer '" + layer + "'");
  const auto id = sample_id(session_, req);
  const auto trace = forward(session_.model, session_.data.sample(id));
  const auto cls = class_of(session_, req, trace);
  const auto rt = crp::attribute(trace, conditions_of(req), InitSpec::logit(cls), rules_of(session_, req));
  const auto rel = rt.channel_relevance(layer);
  std::vector<ChannelScore> scores(rel.size());
  for (std::size_t c = 0; c < rel.size(); ++c) scores[c] = {c, rel[c], 0.0};
  rank_channels(scores);
  const auto top = count_of(req, "top_n", scores.size());
  if (top < scores.size()) scores.resize(top);
  return {{"layer", layer}, {"sample", id}, {"class", cls}, {"ranking", ranking_json(scores)}};
}

json Service::references(const std::string& layer, std::size_t channel, const json& req) const {
  if (!session_.index) fail(ErrorKind::not_found, "no reference index loaded");
  const ReferenceIndex& idx = *session_.index;
  idx.check_fingerprints(session_.model.fingerprint(), session_.data.fingerprint());
  const std::string target = req.contains("target") ? req.at("target").get<std::string>() : "rel_sum";
  std::optional<std::size_t> cls;
  if (req.contains("class") && !req.at("class").is_null()) cls = req.at("class").get<std::size_t>();
  const auto k = count_of(req, "k", std::min<std::size_t>(8, idx.k));
  const auto ranking = query_references(idx, layer, channel, target, cls, k);
  const bool thumbs = flag_of(req, "thumbnails", true);
  const auto rules = rules_of(session_, req);
  const auto [H, W] = input_extent(session_.model.input_shape());
  json entries = json::array();
  for (const auto& e : ranking.entries) {
    json item = {{"sample", e.sample}, {"score", e.score}, {"class", e.cls >= 0 ? json(e.cls) : json(nullptr)}};
    const Tensor& x = session_.data.sample(e.sample);
    if (thumbs && x.rank() == 3 && (x.extent(0) == 1 || x.extent(0) == 3)) {
      const auto ref = concept_reference(session_.model, x, layer, channel, rules, 0.4,
                                         GaussianSpec::scaled_for(std::max(H, W)));
      const auto& box = ref.crop->box;
      Tensor crop({x.extent(0), box.height, box.width});
      for (std::size_t c = 0; c < x.extent(0); ++c) {
        for (std::size_t y = 0; y < box.height; ++y) {
          for (std::size_t xx = 0; xx < box.width; ++xx) {
            crop[(c * box.height + y) * box.width + xx] = ref.sample[(c * H + box.top + y) * W + box.left + xx];
          }
        }
      }
      item["box"] = {{"top", box.top}, {"left", box.left}, {"height", box.height}, {"width", box.width}};
      item["unmasked"] = ref.unmasked_warning;
      item["thumbnail"] = base64_encode(encode_png(sample_image(crop)));
    }
    entries.push_back(std::move(item));
  }
  return {{"layer", layer},
          {"channel", channel},
          {"target", target},
          {"class", cls ? json(*cls) : json(nullptr)},
          {"k", k},
          {"entries", std::move(entries)}};
}

json Service::region(const json& req) const {
  const auto id = sample_id(session_, req);
  const auto layer = layer_of(session_, req);
  const auto trace = forward(session_.model, session_.data.sample(id));
  const auto cls = class_of(session_, req, trace);
  const auto [H, W] = input_extent(session_.model.input_shape());
  const auto mask = region_of(req, H, W);
  const auto scores = local_concept_query(trace, conditions_of(req), InitSpec::logit(cls), rules_of(session_, req),
                                          layer, mask, session_.workers);
  std::size_t pixels = 0;
  for (auto v : mask) pixels += v;
  return {{"layer", layer}, {"sample", id}, {"class", cls}, {"pixels", pixels}, {"ranking", ranking_json(scores)}};
}

json Service::atlas(const json& req) const {
  const auto id = sample_id(session_, req);
  const auto layer = layer_of(session_, req);
  const auto trace = forward(session_.model, session_.data.sample(id));
  const auto cls = class_of(session_, req, trace);
  const auto [H, W] = input_extent(session_.model.input_shape());
  RegionPartition partition;
  if (req.contains("labels")) {
    partition = partition_from_labels(H, W, req.at("labels").get<std::vector<std::int64_t>>(), "request");
  } else {
    const std::string grid = req.contains("grid") ? req.at("grid").get<std::string>() : "4x4";
    const auto x = grid.find('x');
    if (x == std::string::npos) fail(ErrorKind::usage, "grid must look like 4x4");
    try {
      partition = grid_partition(H, W, std::stoul(grid.substr(0, x)), std::stoul(grid.substr(x + 1)));
    } catch (const std::invalid_argument&) {
      fail(ErrorKind::usage, "grid must look like 4x4");
    }
  }
  const auto atlas = build_atlas(trace, conditions_of(req), InitSpec::logit(cls), rules_of(session_, req), layer,
                                 partition, count_of(req, "top_n", 5), flag_of(req, "density_threshold", true),
                                 session_.workers);
  json doc = json::parse(atlas.to_json());
  doc["sample"] = id;
  doc["class"] = cls;
  return doc;
}

json Service::graph(const json& req) const {
  const auto id = sample_id(session_, req);
  if (!req.contains("root")) fail(ErrorKind::usage, "missing 'root' (layer:channel)");
  const auto [root_layer, root_channel] = layer_channel(req.at("root").get<std::string>());
  const auto trace = forward(session_.model, session_.data.sample(id));
  const auto cls = class_of(session_, req, trace);
  GraphOptions opts;
  if (req.contains("layers")) opts.layers = req.at("layers").get<std::vector<std::string>>();
  opts.k = count_of(req, "k", 3);
  opts.ascending = flag_of(req, "ascending", false);
  opts.workers = session_.workers;
  const auto g = build_graph(trace, conditions_of(req), InitSpec::logit(cls), rules_of(session_, req), root_layer,
                             root_channel, opts);
  json doc = json::parse(export_graph(g));
  doc["sample"] = id;
  doc["class"] = cls;
  return doc;
}

json Service::flip(const json& req) const {
  const auto id = sample_id(session_, req);
  const auto layer = layer_of(session_, req);
  const Tensor& x = session_.data.sample(id);
  const auto trace = forward(session_.model, x);
  const auto cls = class_of(session_, req, trace);
  RankingSpec ranking{conditions_of(req), InitSpec::logit(cls), rules_of(session_, req)};
  const auto order = flip_order_from_string(req.contains("order") ? req.at("order").get<std::string>() : "desc");
  const std::size_t C = session_.model.node(layer).out_shape[0];
  const auto curve = flip_filters(session_.model, x, layer, cls, ranking, order, count_of(req, "steps", C),
                                  count_of(req, "seed", 0));
  json steps = json::array();
  for (const auto& s : curve.steps) {
    steps.push_back({{"channel", s.channel >= 0 ? json(s.channel) : json(nullptr)},
                     {"disabled", s.disabled},
                     {"logits", s.logits},
                     {"relative", s.relative},
                     {"softmax", s.softmax},
                     {"softmax_relative", s.softmax_relative}});
  }
  return {{"layer", layer},
          {"sample", id},
          {"class", cls},
          {"order", to_string(curve.order)},
          {"seed", curve.seed},
          {"ranking", curve.ranking},
          {"channel_relevance", curve.channel_relevance},
          {"absolute", curve.absolute},
          {"steps", std::move(steps)}};
}

json Service::blend(const json& req) const {
  const auto id = sample_id(session_, req);
  const auto donor = sample_id(session_, req, "donor");
  const auto layer = layer_of(session_, req);
  const Shape& shape = session_.model.node(layer).out_shape;
  if (shape.size() != 3) fail(ErrorKind::usage, "blending needs a (C, H, W) layer");
  const Tensor& x = session_.data.sample(id);
  const auto trace = forward(session_.model, x);
  const auto cls = class_of(session_, req, trace);
  const auto mask = region_of(req, shape[1], shape[2]);
  const Tensor donor_act = forward(session_.model, session_.data.sample(donor)).at(layer);
  const bool mean = flag_of(req, "mean", false);
  ActivationEdit edit;
  if (mean) {
    Tensor means({shape[0]}, 0.0f);
    const auto avg = channel_reduce(donor_act, SpatialReduce::sum);
    for (std::size_t c = 0; c < shape[0]; ++c) means[c] = static_cast<float>(avg[c] / static_cast<double>(shape[1] * shape[2]));
    edit = ActivationEdit::blend_mean_with(layer, BoolMask({shape[1], shape[2]}, mask), means, 0.0);
  } else {
    edit = ActivationEdit::blend_with(layer, BoolMask({shape[1], shape[2]}, mask), donor_act, 0.0);
  }
  std::vector<double> alphas = req.contains("alphas") ? req.at("alphas").get<std::vector<double>>()
                                                      : std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::pair<std::string, std::size_t>> tracked;
  if (req.contains("track")) {
    for (const auto& t : req.at("track")) tracked.push_back(layer_channel(t.get<std::string>()));
  }
  RankingSpec spec{conditions_of(req), InitSpec::logit(cls), rules_of(session_, req)};
  const auto sweep = blend_sweep(session_.model, x, edit, alphas, tracked, spec, session_.workers);
  json points = json::array();
  for (const auto& p : sweep.points) points.push_back({{"alpha", p.alpha}, {"logits", p.logits}, {"tracked", p.tracked}});
  json tr = json::array();
  for (const auto& [l, c] : tracked) tr.push_back(l + ":" + std::to_string(c));
  return {{"layer", layer}, {"sample", id},   {"donor", donor},          {"class", cls},
          {"mode", mean ? "blend_mean" : "blend"}, {"tracked", tr}, {"points", std::move(points)}};
}

json Service::meta() const {
  json layers = json::array();
  for (const auto& n : session_.model.nodes()) {
    layers.push_back({{"id", n.id()}, {"kind", to_string(n.kind())}, {"shape", n.out_shape}});
  }
  json doc = {{"model_fingerprint", session_.model.fingerprint()},
              {"dataset_fingerprint", session_.data.fingerprint()},
              {"samples", session_.data.size()},
              {"classes", session_.model.num_outputs()},
              {"class_names", session_.data.class_names},
              {"rules", session_.rules.canonical()},
              {"layers", std::move(layers)}};
  if (session_.index) {
    const auto& idx = *session_.index;
    doc["index"] = {{"model_fingerprint", idx.model_fingerprint},
                    {"dataset_fingerprint", idx.dataset_fingerprint},
                    {"matches", idx.model_fingerprint == session_.model.fingerprint() &&
                                    idx.dataset_fingerprint == session_.data.fingerprint()},
                    {"layers", idx.layers},
                    {"targets", idx.targets},
                    {"k", idx.k}};
  } else {
    doc["index"] = nullptr;
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

int http_status(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::usage:
    case ErrorKind::format:
    case ErrorKind::shape: return 400;
    case ErrorKind::not_found: return 404;
    case ErrorKind::fingerprint: return 409;
    case ErrorKind::invalid_condition: return 422;
    case ErrorKind::compute: return 500;
  }
  return 500;
}

namespace {

HttpResponse error_response(int status, const std::string& kind, const std::string& message) {
  return {status, json{{"error", {{"kind", kind}, {"message", message}}}}.dump()};
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::size_t start = 1;
  while (start <= path.size()) {
    const auto end = std::min(path.find('/', start), path.size());
    if (end > start) parts.push_back(path.substr(start, end - start));
    start = end + 1;
  }
  return parts;
}

// Query strings arrive as text; numeric-looking values become numbers.
json query_json(const std::map<std::string, std::string>& query) {
  json j = json::object();
  for (const auto& [k, v] : query) {
    if (v == "true" || v == "false") {
      j[k] = v == "true";
      continue;
    }
    std::size_t used = 0;
    try {
      const long long n = std::stoll(v, &used);
      if (used == v.size()) {
        j[k] = n;
        continue;
      }
    } catch (const std::exception&) {
    }
    j[k] = v;
  }
  return j;
}

}  // namespace

HttpResponse Service::handle(const std::string& method, const std::string& path,
                             const std::map<std::string, std::string>& query, const std::string& body) {
  try {
    const auto parts = split_path(path);
    if (method == "GET" && path == "/openapi.json") return {200, openapi_document()};
    json req;
    if (method == "POST") {
      try {
        req = body.empty() ? json::object() : json::parse(body);
      } catch (const json::exception& e) {
        return error_response(400, "usage", std::string("malformed JSON body: ") + e.what());
      }
      if (!req.is_object()) return error_response(400, "usage", "request body must be a JSON object");
    } else if (method == "GET") {
      req = query_json(query);
    } else {
      return error_response(405, "usage", "method not allowed");
    }

    const std::string key = method + " " + path + " " + req.dump();
    if (auto hit = cache_.get(key)) return {200, *hit};

    json doc;
    if (method == "GET" && parts.size() == 1 && parts[0] == "meta") {
      doc = meta();
    } else if (method == "GET" && parts.size() == 2 && parts[0] == "concepts") {
      doc = concepts(parts[1], req);
    } else if (method == "GET" && parts.size() == 3 && parts[0] == "references") {
      std::size_t channel = 0;
      try {
        channel = std::stoul(parts[2]);
      } catch (const std::exception&) {
        return error_response(400, "usage", "channel must be an integer");
      }
      doc = references(parts[1], channel, req);
    } else if (method == "POST" && parts.size() == 1) {
      const auto& name = parts[0];
      if (name == "predict") doc = predict(req);
      else if (name == "attribute") doc = attribute(req);
      else if (name == "region") doc = region(req);
      else if (name == "atlas") doc = atlas(req);
      else if (name == "graph") doc = graph(req);
      else if (name == "flip") doc = flip(req);
      else if (name == "blend") doc = blend(req);
      else return error_response(404, "not_found", "no route " + method + " " + path);
    } else {
      return error_response(404, "not_found", "no route " + method + " " + path);
    }
    std::string text = doc.dump();
    cache_.put(key, text);
    return {200, std::move(text)};
  } catch (const Error& e) {
    return error_response(http_status(e.kind()), to_string(e.kind()), e.what());
  } catch (const json::exception& e) {
    return error_response(400, "usage", std::string("bad request field: ") + e.what());
  } catch (const std::exception& e) {
    return error_response(500, "compute", e.what());
  }
}

// ---------------------------------------------------------------------------
// OpenAPI
// ---------------------------------------------------------------------------

const std::string& openapi_document() {
  static const std::string doc = [] {
    auto body = [](json props, std::vector<std::string> required) {
      return json{{"required", true},
                  {"content", {{"application/json", {{"schema", {{"type", "object"}, {"properties", props}, {"required", required}}}}}}}};
    };
    const json ok = {{"200", {{"description", "result document"}}},
                     {"400", {{"description", "malformed request"}}},
                     {"404", {{"description", "unknown layer, channel or sample"}}},
                     {"409", {{"description", "index fingerprint mismatch"}}},
                     {"422", {{"description", "invalid condition"}}}};
    const json integer = {{"type", "integer"}}, string = {{"type", "string"}}, boolean = {{"type", "boolean"}};
    const json strings = {{"type", "array"}, {"items", string}};
    const json conditions = {{"description", "list of \"layer:c,c\" strings or {layer: [c]}"}};
    const json rules = {{"description", "composite name or {composite, epsilon, overrides}"}};
    const json rect = {{"type", "object"},
                       {"properties", {{"top", integer}, {"left", integer}, {"height", integer}, {"width", integer}}}};
    const json mask = {{"type", "array"}, {"items", integer}, {"description", "row-major 0/1 per pixel"}};
    auto param = [](const std::string& name, const std::string& in, json schema, bool required) {
      return json{{"name", name}, {"in", in}, {"required", required}, {"schema", schema}};
    };
    json paths;
    paths["/meta"]["get"] = {{"summary", "model, dataset and index fingerprints"}, {"responses", ok}};
    paths["/predict"]["post"] = {{"summary", "logits of a sample"}, {"requestBody", body({{"sample", integer}}, {"sample"})},
                                 {"responses", ok}};
    paths["/attribute"]["post"] = {
        {"summary", "conditional heatmap and per-layer channel relevances"},
        {"requestBody", body({{"sample", integer}, {"class", integer}, {"conditions", conditions}, {"rules", rules},
                              {"normalize", boolean}},
                             {"sample"})},
        {"responses", ok}};
    paths["/concepts/{layer}"]["get"] = {
        {"summary", "channels of a layer ranked by relevance"},
        {"parameters", {param("layer", "path", string, true), param("sample", "query", integer, true),
                        param("class", "query", integer, false), param("top_n", "query", integer, false)}},
        {"responses", ok}};
    paths["/references/{layer}/{channel}"]["get"] = {
        {"summary", "reference samples with masked thumbnails"},
        {"parameters", {param("layer", "path", string, true), param("channel", "path", integer, true),
                        param("target", "query", string, false), param("class", "query", integer, false),
                        param("k", "query", integer, false), param("thumbnails", "query", boolean, false)}},
        {"responses", ok}};
    paths["/region"]["post"] = {
        {"summary", "channels ranked by relevance inside a region"},
        {"requestBody", body({{"sample", integer}, {"class", integer}, {"layer", string}, {"rect", rect}, {"mask", mask},
                              {"conditions", conditions}, {"rules", rules}},
                             {"sample", "layer"})},
        {"responses", ok}};
    paths["/atlas"]["post"] = {
        {"summary", "concept atlas over a grid or label map"},
        {"requestBody", body({{"sample", integer}, {"class", integer}, {"layer", string}, {"grid", string},
                              {"labels", mask}, {"top_n", integer}, {"density_threshold", boolean}},
                             {"sample", "layer"})},
        {"responses", ok}};
    paths["/graph"]["post"] = {
        {"summary", "attribution graph below a concept"},
        {"requestBody", body({{"sample", integer}, {"class", integer}, {"root", string}, {"layers", strings},
                              {"k", integer}, {"ascending", boolean}},
                             {"sample", "root"})},
        {"responses", ok}};
    paths["/flip"]["post"] = {
        {"summary", "filter flipping curve"},
        {"requestBody", body({{"sample", integer}, {"class", integer}, {"layer", string}, {"order", string},
                              {"steps", integer}, {"seed", integer}},
                             {"sample", "layer"})},
        {"responses", ok}};
    paths["/blend"]["post"] = {
        {"summary", "concept insertion sweep over alpha"},
        {"requestBody", body({{"sample", integer}, {"donor", integer}, {"class", integer}, {"layer", string},
                              {"alphas", {{"type", "array"}, {"items", {{"type", "number"}}}}}, {"rect", rect},
                              {"mask", mask}, {"mean", boolean}, {"track", strings}},
                             {"sample", "donor", "layer"})},
        {"responses", ok}};
    json j = {{"openapi", "3.0.3"},
              {"info", {{"title", "crp service"}, {"version", "1.0.0"}}},
              {"paths", paths}};
    return j.dump(2) + "\n";
  }();
  return doc;
}

}  // namespace crp
