#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crp/attribute.hpp"

namespace crp {

enum class TargetBasis { activation, relevance };

/// Which output class a relevance target conditions on.
enum class ClassSource { label, predicted, fixed };

/// ActMax / RelMax scoring of one channel for one sample.
struct MaximizationTarget {
  TargetBasis basis = TargetBasis::relevance;
  SpatialReduce aggregation = SpatialReduce::sum;

  // relevance basis only
  ClassSource class_source = ClassSource::label;  // falls back to predicted without labels
  std::size_t fixed_class = 0;
  ConditionSet base;
  RuleComposite rules;
  bool normalize_per_layer = false;

  // activation basis only: apply max(0, .) to the layer output first
  bool rectify = false;

  /// act_sum, act_max, rel_sum or rel_max
  std::string name() const;
  static MaximizationTarget parse(const std::string& name);
};

struct RankEntry {
  std::size_t sample = 0;
  double score = 0.0;
  long cls = -1;  // output class the score was conditioned on; -1 for activations
};

struct ReferenceRanking {
  std::string layer;
  std::size_t channel = 0;
  std::string target;
  std::optional<std::size_t> class_filter;
  std::vector<RankEntry> entries;  // score descending, sample id ascending on ties
};

struct IndexOptions {
  std::vector<std::string> layers;
  std::vector<MaximizationTarget> targets;
  std::size_t k = 40;
  std::size_t workers = 1;
  /// Also compute relevance targets once per output class.
  bool class_conditional = false;
};

/// Score matrices (samples x channels) per (layer, target, class) plus the
/// fingerprints of the artifacts they were computed from.
class ReferenceIndex {
 public:
  std::string model_fingerprint;
  std::string dataset_fingerprint;
  std::size_t k = 0;
  std::size_t samples = 0;
  std::size_t num_classes = 0;
  bool class_conditional = false;
  std::vector<std::string> layers;
  std::vector<std::string> targets;
  std::string rules;
  /// Class each sample's relevance was conditioned on (label or prediction).
  std::vector<long> sample_classes;

  /// key(layer, target, cls) -> (samples, channels)
  std::map<std::string, Tensor64> scores;

  static std::string key(const std::string& layer, const std::string& target, long cls = -1);

  bool has(const std::string& layer, const std::string& target, long cls = -1) const;
  const Tensor64& matrix(const std::string& layer, const std::string& target, long cls = -1) const;
  std::size_t channels(const std::string& layer) const;

  /// Full sorted ranking of one channel.
  std::vector<RankEntry> rank(const std::string& layer, std::size_t channel, const std::string& target,
                              long cls = -1) const;

  /// Throws a fingerprint error when the index was built from other artifacts.
  void check_fingerprints(const std::string& model_fp, const std::string& data_fp) const;

  /// Writes `<dir>/index.crpw` and `<dir>/index.json`.
  void save(const std::filesystem::path& dir) const;
  static ReferenceIndex load(const std::filesystem::path& dir);

  /// index.json text; deterministic.
  std::string rankings_json() const;
};

/// Activation or relevance scores of every channel of `layer` for one sample.
std::vector<double> channel_scores(const ActivationTrace& trace, const std::string& layer,
                                   const MaximizationTarget& target, std::size_t cls);

/// Class a relevance target conditions on for one sample.
std::size_t conditioning_class(const MaximizationTarget& target, const ActivationTrace& trace,
                               const std::optional<std::vector<std::int32_t>>& labels, std::size_t sample);

ReferenceIndex build_index(const ModelGraph& g, const DatasetContainer& data, const IndexOptions& opts);

ReferenceRanking query_references(const ReferenceIndex& idx, const std::string& layer, std::size_t channel,
                                  const std::string& target, std::optional<std::size_t> class_filter,
                                  std::size_t k);

struct ClassRelevance {
  std::size_t cls = 0;
  double mean = 0.0;
};

/// Mean conditional relevance of one channel per output class, descending.
std::vector<ClassRelevance> rank_classes_for_concept(const ModelGraph& g, const DatasetContainer& data,
                                                     const std::string& layer, std::size_t channel,
                                                     const RuleComposite& rules = {}, std::size_t workers = 1);

}  // namespace crp
