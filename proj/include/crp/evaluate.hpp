#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crp/concepts.hpp"

namespace crp {

enum class FlipOrder { relevance_desc, relevance_asc, random };

FlipOrder flip_order_from_string(const std::string& s);
const char* to_string(FlipOrder o) noexcept;

/// Relevance setup used to rank channels: condition, init and rules.
struct RankingSpec {
  ConditionSet cond;
  InitSpec init;
  RuleComposite rules;
};

struct FlipStep {
  long channel = -1;  // channel disabled at this step; -1 at step 0
  std::vector<std::size_t> disabled;
  std::vector<double> logits;
  std::vector<double> relative;          // logit_t / logit_0 (absolute where logit_0 == 0)
  std::vector<double> softmax;
  std::vector<double> softmax_relative;  // p_t / p_0
};

struct FlipCurve {
  std::string layer;
  FlipOrder order = FlipOrder::relevance_desc;
  std::uint64_t seed = 0;
  std::size_t target_class = 0;
  std::vector<std::size_t> ranking;     // full channel order
  std::vector<double> channel_relevance;
  std::vector<bool> absolute;           // per class: logit_0 was 0
  std::vector<FlipStep> steps;

  std::string to_csv() const;
};

/// Ranks channels of `layer` once, then zeroes them one by one.
FlipCurve flip_filters(const ModelGraph& g, const Tensor& x, const std::string& layer, std::size_t target_class,
                       const RankingSpec& ranking, FlipOrder order, std::size_t max_steps, std::uint64_t seed = 0);

struct BlendPoint {
  double alpha = 0.0;
  std::vector<double> logits;
  std::vector<double> tracked;  // relevance of each tracked channel
};

struct BlendSweep {
  ActivationEdit edit;
  std::vector<std::pair<std::string, std::size_t>> tracked;
  std::vector<BlendPoint> points;

  std::string to_csv() const;
};

/// Forward + attribution for every alpha with the template's alpha replaced.
BlendSweep blend_sweep(const ModelGraph& g, const Tensor& x, const ActivationEdit& edit_template,
                       const std::vector<double>& alphas,
                       const std::vector<std::pair<std::string, std::size_t>>& tracked, const RankingSpec& relevance,
                       std::size_t workers = 1);

struct SimilarityMatrix {
  std::string layer;
  std::size_t channels = 0;
  std::size_t k = 0;
  std::string target;
  Tensor64 rho;       // (C, C), symmetric
  Tensor64 distance;  // 1 - rho
  std::vector<bool> flagged;  // channel had an all-zero activation vector on one of its references

  std::string to_csv(bool distances = false) const;
};

/// Averaged cosine similarity of post-ReLU channel activations over each
/// channel's top-k reference samples, symmetrized.
SimilarityMatrix channel_similarity(const ModelGraph& g, const DatasetContainer& data, const ReferenceIndex& idx,
                                    const std::string& layer, std::size_t k, const std::string& target = "rel_sum",
                                    std::size_t workers = 1);

}  // namespace crp
