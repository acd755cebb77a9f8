#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "crp/attribute.hpp"

namespace crp {

struct BoundingBox {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

struct ReceptiveField {
  std::string layer;
  std::size_t neuron = 0;            // flat index into the layer output
  std::vector<std::size_t> coords;   // (channel, p, q) or (index)
  std::size_t height = 0, width = 0; // input spatial extent
  std::vector<std::uint8_t> mask;    // (height, width), 1 inside the field
  BoundingBox box;

  std::size_t area() const;
};

/// Flat backward pass from a one-hot start at `neuron` of `layer` over an
/// all-ones input; the field is every input position with |R| > 1e-12.
/// Neurons that only see padding get an empty mask and a zero box.
ReceptiveField receptive_field(const ModelGraph& g, const std::string& layer, std::size_t neuron);
ReceptiveField receptive_field(const ModelGraph& g, const std::string& layer, const std::vector<std::size_t>& coords);

struct GaussianSpec {
  std::size_t size = 29;
  double sigma = 4.7;

  /// Default kernel scaled for inputs of `extent` px (unchanged at >= 224 px).
  static GaussianSpec scaled_for(std::size_t extent);
};

/// Separable Gaussian blur of an (H, W) map; border taps renormalized.
Tensor64 gaussian_smooth(const Tensor64& map, const GaussianSpec& spec);

struct MaskedReference {
  Tensor sample;                  // pixels below threshold zeroed (all channels)
  std::vector<std::uint8_t> kept; // (H, W)
  bool unmasked_warning = false;  // relevance map had no positive value
  std::optional<ReceptiveField> crop;
};

/// Zeroes pixels with rel < threshold * max(rel) after optional smoothing.
MaskedReference mask_reference(const Tensor& sample, const Tensor64& rel_map, double threshold_fraction,
                               const std::optional<GaussianSpec>& smooth = std::nullopt);

/// Heatmap-masked, receptive-field-cropped reference for channel `channel`
/// of `layer`: the conditional heatmap starts at the channel's activations and
/// the crop is the field of the channel's most activated neuron (the whole
/// input if that field is empty).
MaskedReference concept_reference(const ModelGraph& g, const Tensor& sample, const std::string& layer,
                                  std::size_t channel, const RuleComposite& rules, double threshold_fraction = 0.4,
                                  const std::optional<GaussianSpec>& smooth = std::nullopt);

struct RegionPartition {
  std::size_t height = 0, width = 0;
  std::vector<std::int32_t> labels;  // (height, width), dense ids
  std::size_t count = 0;
  std::string source;

  std::vector<std::uint8_t> region_mask(std::size_t region) const;
  std::size_t area(std::size_t region) const;
};

RegionPartition grid_partition(std::size_t height, std::size_t width, std::size_t rows, std::size_t cols);
/// Integer tensor "regions" in a CRPW file, or an 8-bit indexed/gray PNG.
/// Ids are relabeled densely in ascending order of the stored values.
RegionPartition load_partition(const std::filesystem::path& path);
RegionPartition partition_from_labels(std::size_t height, std::size_t width, const std::vector<std::int64_t>& raw,
                                      std::string source);

struct ChannelScore {
  std::size_t channel = 0;
  double relevance = 0.0;
  double share = 0.0;  // relevance / sum |relevance| over channels in the region
};

struct AtlasRegion {
  std::vector<ChannelScore> ranking;  // top_n, relevance descending, channel ascending on ties
  double relevance = 0.0;             // all channels
  double density = 0.0;               // relevance / area
  bool below_threshold = false;
  long primary = -1, secondary = -1;
};

struct ConceptAtlas {
  std::string layer;
  std::size_t channels = 0;
  std::size_t top_n = 0;
  bool density_threshold = false;
  RegionPartition partition;
  std::vector<AtlasRegion> regions;
  std::vector<std::vector<double>> aggregates;  // [channel][region]
  std::vector<double> global;                   // per channel, summed at the layer
  std::vector<ChannelScore> global_ranking;

  std::string to_json() const;
};

/// Input-space conditional maps (H, W) for every channel of `layer`.
std::vector<Tensor64> channel_input_maps(const ActivationTrace& trace, const ConditionSet& base, const InitSpec& init,
                                         const RuleComposite& rules, const std::string& layer,
                                         std::size_t workers = 1);

ConceptAtlas build_atlas(const ActivationTrace& trace, const ConditionSet& base, const InitSpec& init,
                         const RuleComposite& rules, const std::string& layer, const RegionPartition& partition,
                         std::size_t top_n, bool density_threshold, std::size_t workers = 1);

/// All channels of `layer` ranked by relevance inside `region_mask` (H, W).
std::vector<ChannelScore> local_concept_query(const ActivationTrace& trace, const ConditionSet& base,
                                              const InitSpec& init, const RuleComposite& rules,
                                              const std::string& layer, const std::vector<std::uint8_t>& region_mask,
                                              std::size_t workers = 1);

/// Sorts by relevance descending, channel ascending on ties; fills shares.
void rank_channels(std::vector<ChannelScore>& scores);

}  // namespace crp
