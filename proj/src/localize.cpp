#include "crp/localize.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>

#include "crp/image.hpp"
#include "crp/parallel.hpp"

namespace crp {

using json = nlohmann::json;

namespace {

constexpr double kFieldTolerance = 1e-12;

// (H, W) of the input as seen by heatmaps: rank-3 inputs drop the channel axis,
// rank-2 (C, L) inputs become 1 x L, vectors become 1 x N.
std::pair<std::size_t, std::size_t> spatial_extent(const Shape& s) {
  if (s.size() == 3) return {s[1], s[2]};
  if (s.size() == 2) return {1, s[1]};
  return {1, s[0]};
}

// |R| summed over input channels, flattened to H x W.
std::vector<double> input_magnitude(const Tensor64& r) {
  const auto [H, W] = spatial_extent(r.shape());
  const std::size_t plane = H * W;
  std::vector<double> out(plane, 0.0);
  for (std::size_t i = 0; i < r.size(); ++i) out[i % plane] += std::fabs(r[i]);
  return out;
}

}  // namespace

std::size_t ReceptiveField::area() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

ReceptiveField receptive_field(const ModelGraph& g, const std::string& layer, std::size_t neuron) {
  const auto idx = g.find(layer);
  if (!idx) fail(ErrorKind::not_found, "unknown layer '" + layer + "'");
  if (*idx == 0) fail(ErrorKind::usage, "receptive field of the input layer is the pixel itself");
  const Shape& out = g.node(*idx).out_shape;
  const std::size_t n = shape_product(out);
  if (neuron >= n) {
    fail(ErrorKind::not_found, "neuron " + std::to_string(neuron) + " out of range for '" + layer + "' " +
                                   shape_to_string(out));
  }
  const auto trace = forward(g, Tensor(g.input_shape(), 1.0f));
  const auto rules = RuleComposite::flat_all();
  Tensor64 start(out, 0.0);
  start[neuron] = 1.0;
  const auto rt = propagate(trace, *idx, std::move(start), {}, rules.resolve(g), rules.epsilon, false);

  ReceptiveField rf;
  rf.layer = layer;
  rf.neuron = neuron;
  std::size_t rest = neuron;
  rf.coords.assign(out.size(), 0);
  for (std::size_t d = out.size(); d-- > 0;) {
    rf.coords[d] = rest % out[d];
    rest /= out[d];
  }
  std::tie(rf.height, rf.width) = spatial_extent(g.input_shape());
  const auto mag = input_magnitude(rt.input());
  rf.mask.assign(mag.size(), 0);
  std::size_t top = rf.height, left = rf.width, bottom = 0, right = 0;
  for (std::size_t y = 0; y < rf.height; ++y) {
    for (std::size_t x = 0; x < rf.width; ++x) {
      if (mag[y * rf.width + x] > kFieldTolerance) {
        rf.mask[y * rf.width + x] = 1;
        top = std::min(top, y);
        left = std::min(left, x);
        bottom = std::max(bottom, y);
        right = std::max(right, x);
      }
    }
  }
  // Neurons that only read padding have an empty field and a zero box.
  if (top < rf.height) rf.box = {top, left, bottom - top + 1, right - left + 1};
  return rf;
}

ReceptiveField receptive_field(const ModelGraph& g, const std::string& layer, const std::vector<std::size_t>& coords) {
  const auto idx = g.find(layer);
  if (!idx) fail(ErrorKind::not_found, "unknown layer '" + layer + "'");
  const Shape& out = g.node(*idx).out_shape;
  if (coords.size() != out.size()) {
    fail(ErrorKind::not_found, "layer '" + layer + "' needs " + std::to_string(out.size()) + " coordinates");
  }
  std::size_t flat = 0;
  for (std::size_t d = 0; d < out.size(); ++d) {
    if (coords[d] >= out[d]) {
      fail(ErrorKind::not_found, "coordinate " + std::to_string(coords[d]) + " out of range for '" + layer + "' " +
                                     shape_to_string(out));
    }
    flat = flat * out[d] + coords[d];
  }
  return receptive_field(g, layer, flat);
}

GaussianSpec GaussianSpec::scaled_for(std::size_t extent) {
  GaussianSpec s;
  if (extent >= 224) return s;
  const double f = static_cast<double>(extent) / 224.0;
  s.sigma = 4.7 * f;
  auto size = static_cast<std::size_t>(std::lround(29.0 * f));
  if (size % 2 == 0) ++size;
  s.size = std::max<std::size_t>(size, 1);
  return s;
}

Tensor64 gaussian_smooth(const Tensor64& map, const GaussianSpec& spec) {
  if (map.rank() != 2) fail(ErrorKind::shape, "smoothing needs an (H, W) map");
  if (spec.size % 2 == 0 || spec.sigma <= 0.0) fail(ErrorKind::usage, "Gaussian kernel needs odd size and sigma > 0");
  const long r = static_cast<long>(spec.size / 2);
  std::vector<double> k(spec.size);
  for (long t = -r; t <= r; ++t) k[static_cast<std::size_t>(t + r)] = std::exp(-0.5 * t * t / (spec.sigma * spec.sigma));
  const long H = static_cast<long>(map.extent(0)), W = static_cast<long>(map.extent(1));
  auto pass = [&](const Tensor64& in, bool horizontal) {
    Tensor64 out(in.shape(), 0.0);
    for (long y = 0; y < H; ++y) {
      for (long x = 0; x < W; ++x) {
        double acc = 0.0, wsum = 0.0;
        for (long t = -r; t <= r; ++t) {
          const long yy = horizontal ? y : y + t, xx = horizontal ? x + t : x;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          const double w = k[static_cast<std::size_t>(t + r)];
          acc += w * in[static_cast<std::size_t>(yy * W + xx)];
          wsum += w;
        }
        out[static_cast<std::size_t>(y * W + x)] = acc / wsum;
      }
    }
    return out;
  };
  return pass(pass(map, true), false);
}

MaskedReference mask_reference(const Tensor& sample, const Tensor64& rel_map, double threshold_fraction,
                               const std::optional<GaussianSpec>& smooth) {
  if (!(threshold_fraction > 0.0 && threshold_fraction < 1.0)) {
    fail(ErrorKind::usage, "threshold fraction must lie in (0, 1)");
  }
  const auto [H, W] = spatial_extent(sample.shape());
  if (rel_map.rank() != 2 || rel_map.extent(0) != H || rel_map.extent(1) != W) {
    fail(ErrorKind::shape, "relevance map " + shape_to_string(rel_map.shape()) + " does not match sample " +
                               shape_to_string(sample.shape()));
  }
  const Tensor64 rel = smooth ? gaussian_smooth(rel_map, *smooth) : rel_map;
  double peak = 0.0;
  for (double v : rel.data()) peak = std::max(peak, v);

  MaskedReference out;
  out.sample = sample;
  out.kept.assign(H * W, 1);
  if (peak <= 0.0) {
    out.unmasked_warning = true;
    return out;
  }
  const double cut = threshold_fraction * peak;
  const std::size_t plane = H * W;
  for (std::size_t p = 0; p < plane; ++p) out.kept[p] = rel[p] >= cut ? 1 : 0;
  for (std::size_t i = 0; i < out.sample.size(); ++i) {
    if (!out.kept[i % plane]) out.sample[i] = 0.0f;
  }
  return out;
}

MaskedReference concept_reference(const ModelGraph& g, const Tensor& sample, const std::string& layer,
                                  std::size_t channel, const RuleComposite& rules, double threshold_fraction,
                                  const std::optional<GaussianSpec>& smooth) {
  const auto trace = forward(g, sample);
  const auto rt = attribute(trace, {}, InitSpec::layer_activation(layer, channel), rules);
  auto out = mask_reference(sample, rt.input_map().reshaped(Shape{spatial_extent(sample.shape()).first,
                                                                    spatial_extent(sample.shape()).second}),
                            threshold_fraction, smooth);
  const Tensor& act = trace.at(layer);
  const auto values = act.channel(channel);
  const auto best = static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
  out.crop = receptive_field(g, layer, channel * values.size() + best);
  if (out.crop->area() == 0) {
    std::fill(out.crop->mask.begin(), out.crop->mask.end(), 1);
    out.crop->box = {0, 0, out.crop->height, out.crop->width};
  }
  return out;
}

std::vector<std::uint8_t> RegionPartition::region_mask(std::size_t region) const {
  if (region >= count) fail(ErrorKind::not_found, "region " + std::to_string(region) + " out of range");
  std::vector<std::uint8_t> m(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) m[i] = labels[i] == static_cast<std::int32_t>(region) ? 1 : 0;
  return m;
}

std::size_t RegionPartition::area(std::size_t region) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::int32_t>(region)));
}

RegionPartition grid_partition(std::size_t height, std::size_t width, std::size_t rows, std::size_t cols) {
  if (rows < 1 || cols < 1) fail(ErrorKind::usage, "grid needs at least one row and one column");
  if (rows > height || cols > width) {
    fail(ErrorKind::usage, "grid " + std::to_string(rows) + "x" + std::to_string(cols) + " exceeds input " +
                               std::to_string(height) + "x" + std::to_string(width));
  }
  // leading tiles take the remainder: 7 px in 2 rows -> 4 + 3
  auto bounds = [](std::size_t extent, std::size_t parts) {
    std::vector<std::size_t> start(parts + 1, 0);
    for (std::size_t i = 0; i < parts; ++i) start[i + 1] = start[i] + extent / parts + (i < extent % parts ? 1 : 0);
    return start;
  };
  const auto ys = bounds(height, rows), xs = bounds(width, cols);
  RegionPartition p;
  p.height = height;
  p.width = width;
  p.count = rows * cols;
  p.source = "grid:" + std::to_string(rows) + "x" + std::to_string(cols);
  p.labels.resize(height * width);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t y = ys[r]; y < ys[r + 1]; ++y) {
      for (std::size_t c = 0; c < cols; ++c) {
        for (std::size_t x = xs[c]; x < xs[c + 1]; ++x) p.labels[y * width + x] = static_cast<std::int32_t>(r * cols + c);
      }
    }
  }
  return p;
}

RegionPartition partition_from_labels(std::size_t height, std::size_t width, const std::vector<std::int64_t>& raw,
                                      std::string source) {
  if (raw.size() != height * width || raw.empty()) {
    fail(ErrorKind::shape, "region map has " + std::to_string(raw.size()) + " labels for " + std::to_string(height) +
                               "x" + std::to_string(width) + " pixels");
  }
  std::map<std::int64_t, std::int32_t> dense;
  for (auto v : raw) dense.emplace(v, 0);
  std::int32_t next = 0;
  for (auto& [v, id] : dense) id = next++;
  RegionPartition p;
  p.height = height;
  p.width = width;
  p.count = dense.size();
  p.source = std::move(source);
  p.labels.reserve(raw.size());
  for (auto v : raw) p.labels.push_back(dense.at(v));
  return p;
}

RegionPartition load_partition(const std::filesystem::path& path) {
  if (path.extension() == ".png") {
    const auto img = read_indexed_png(path);
    return partition_from_labels(img.height, img.width, std::vector<std::int64_t>(img.values.begin(), img.values.end()),
                                 "png:" + path.filename().string());
  }
  const Blob b = read_blob(path);
  const auto& t = b.get<IntTensor>("regions");
  if (t.rank() != 2) fail(ErrorKind::format, path.string() + ": regions must be an (H, W) int32 tensor");
  return partition_from_labels(t.extent(0), t.extent(1), std::vector<std::int64_t>(t.data().begin(), t.data().end()),
                               "tensor:" + path.filename().string());
}

void rank_channels(std::vector<ChannelScore>& scores) {
  double total = 0.0;
  for (const auto& s : scores) total += std::fabs(s.relevance);
  for (auto& s : scores) s.share = total > 0.0 ? s.relevance / total : 0.0;
  std::sort(scores.begin(), scores.end(), [](const ChannelScore& a, const ChannelScore& b) {
    return a.relevance != b.relevance ? a.relevance > b.relevance : a.channel < b.channel;
  });
}

std::vector<Tensor64> channel_input_maps(const ActivationTrace& trace, const ConditionSet& base, const InitSpec& init,
                                         const RuleComposite& rules, const std::string& layer, std::size_t workers) {
  const ModelGraph& g = trace.graph();
  const auto idx = g.find(layer);
  if (!idx) fail(ErrorKind::not_found, "unknown layer '" + layer + "'");
  const std::size_t C = g.node(*idx).out_shape[0];
  const auto [H, W] = spatial_extent(g.input_shape());
  const auto restricted = base.layers.find(layer);
  std::vector<Tensor64> maps(C);
  parallel_for(C, workers, [&](std::size_t c) {
    if (restricted != base.layers.end() && !restricted->second.count(c)) {
      maps[c] = Tensor64({H, W}, 0.0);
      return;
    }
    const auto rt = attribute(trace, base.with(layer, {c}), init, rules);
    maps[c] = rt.input_map().reshaped(Shape{H, W});
  });
  return maps;
}

ConceptAtlas build_atlas(const ActivationTrace& trace, const ConditionSet& base, const InitSpec& init,
                         const RuleComposite& rules, const std::string& layer, const RegionPartition& partition,
                         std::size_t top_n, bool density_threshold, std::size_t workers) {
  const ModelGraph& g = trace.graph();
  const auto idx = g.find(layer);
  if (!idx) fail(ErrorKind::not_found, "unknown layer '" + layer + "'");
  if (g.node(*idx).out_shape.size() < 2) fail(ErrorKind::usage, "layer '" + layer + "' has no channel axis");
  const auto [H, W] = spatial_extent(g.input_shape());
  if (partition.height != H || partition.width != W) {
    fail(ErrorKind::shape, "partition " + std::to_string(partition.height) + "x" + std::to_string(partition.width) +
                               " does not match input " + std::to_string(H) + "x" + std::to_string(W));
  }
  const auto maps = channel_input_maps(trace, base, init, rules, layer, workers);
  const std::size_t C = maps.size(), K = partition.count;

  ConceptAtlas atlas;
  atlas.layer = layer;
  atlas.channels = C;
  atlas.top_n = top_n == 0 ? C : std::min(top_n, C);
  atlas.density_threshold = density_threshold;
  atlas.partition = partition;
  atlas.aggregates.assign(C, std::vector<double>(K, 0.0));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < H * W; ++p) atlas.aggregates[c][static_cast<std::size_t>(partition.labels[p])] += maps[c][p];
  }

  atlas.regions.resize(K);
  double peak = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    auto& region = atlas.regions[k];
    std::vector<ChannelScore> scores(C);
    for (std::size_t c = 0; c < C; ++c) {
      scores[c] = {c, atlas.aggregates[c][k], 0.0};
      region.relevance += atlas.aggregates[c][k];
    }
    rank_channels(scores);
    scores.resize(atlas.top_n);
    region.ranking = std::move(scores);
    region.density = region.relevance / static_cast<double>(partition.area(k));
    if (!region.ranking.empty()) region.primary = static_cast<long>(region.ranking[0].channel);
    if (region.ranking.size() > 1) region.secondary = static_cast<long>(region.ranking[1].channel);
    peak = k == 0 ? region.density : std::max(peak, region.density);
  }
  if (density_threshold) {
    for (auto& region : atlas.regions) region.below_threshold = peak <= 0.0 || region.density < 0.1 * peak;
  }

  const auto full = attribute(trace, base, init, rules);
  atlas.global = full.channel_relevance(layer);
  for (std::size_t c = 0; c < C; ++c) atlas.global_ranking.push_back({c, atlas.global[c], 0.0});
  rank_channels(atlas.global_ranking);
  return atlas;
}

std::vector<ChannelScore> local_concept_query(const ActivationTrace& trace, const ConditionSet& base,
                                              const InitSpec& init, const RuleComposite& rules,
                                              const std::string& layer, const std::vector<std::uint8_t>& region_mask,
                                              std::size_t workers) {
  const auto [H, W] = spatial_extent(trace.graph().input_shape());
  if (region_mask.size() != H * W) {
    fail(ErrorKind::shape, "region mask has " + std::to_string(region_mask.size()) + " pixels, input has " +
                               std::to_string(H * W));
  }
  if (std::none_of(region_mask.begin(), region_mask.end(), [](std::uint8_t v) { return v != 0; })) {
    fail(ErrorKind::usage, "region mask is empty");
  }
  const auto maps = channel_input_maps(trace, base, init, rules, layer, workers);
  std::vector<ChannelScore> scores(maps.size());
  for (std::size_t c = 0; c < maps.size(); ++c) {
    double acc = 0.0;
    for (std::size_t p = 0; p < H * W; ++p) {
      if (region_mask[p]) acc += maps[c][p];
    }
    scores[c] = {c, acc, 0.0};
  }
  rank_channels(scores);
  return scores;
}

namespace {

json scores_json(const std::vector<ChannelScore>& scores) {
  json a = json::array();
  for (const auto& s : scores) a.push_back({{"channel", s.channel}, {"relevance", s.relevance}, {"share", s.share}});
  return a;
}

}  // namespace

std::string ConceptAtlas::to_json() const {
  json j;
  j["layer"] = layer;
  j["channels"] = channels;
  j["top_n"] = top_n;
  j["density_threshold"] = density_threshold;
  j["partition"] = {{"source", partition.source},
                    {"height", partition.height},
                    {"width", partition.width},
                    {"count", partition.count},
                    {"labels", partition.labels}};
  json rs = json::array();
  for (std::size_t k = 0; k < regions.size(); ++k) {
    const auto& r = regions[k];
    rs.push_back({{"id", k},
                  {"area", partition.area(k)},
                  {"relevance", r.relevance},
                  {"density", r.density},
                  {"below_threshold", r.below_threshold},
                  {"primary", r.primary >= 0 ? json(r.primary) : json(nullptr)},
                  {"secondary", r.secondary >= 0 ? json(r.secondary) : json(nullptr)},
                  {"ranking", scores_json(r.ranking)}});
  }
  j["regions"] = std::move(rs);
  j["global"] = scores_json(global_ranking);
  j["aggregates"] = aggregates;
  return j.dump(2) + "\n";
}

}  // namespace crp
