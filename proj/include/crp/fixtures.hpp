#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "crp/attribute.hpp"

namespace crp {

/// mt19937_64 with a portable mapping to doubles (the standard distributions
/// are implementation-defined, which would make fixtures differ by platform).
class FixtureRng {
 public:
  explicit FixtureRng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi) { return lo + (hi - lo) * static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(gen_() % n); }
  std::uint64_t next() { return gen_(); }

 private:
  std::mt19937_64 gen_;
};

struct Fixture {
  std::string name;
  std::uint64_t seed = 0;
  std::string description;
  ModelGraph model;
  DatasetContainer data;
};

/// mlp8, singlepath, lenet_random, resnet_micro, conv_bn.
std::vector<std::string> fixture_names();
Fixture make_fixture(const std::string& name);

/// Tensor with elements uniform in [lo, hi).
Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo, double hi);

struct ConvStage {
  std::size_t kernel = 3, stride = 1, padding = 0;
};

/// Single-channel conv chain on a (1, H, W) input closed by flatten + dense(->1).
/// Layer ids are conv1..convN.
ModelGraph make_conv_stack(std::size_t height, std::size_t width, const std::vector<ConvStage>& stages,
                           std::uint64_t seed);

/// Explicit relevance messages R_{i<-j} of one node.
struct OracleMessage {
  std::size_t i, j;
  double r;
};

struct OracleAttribution {
  std::vector<std::vector<double>> relevance;  // per node, flattened
  std::vector<std::vector<OracleMessage>> messages;  // per linear node
  std::size_t neurons = 0;
};

/// Conv/dense units whose pre-activations the oracle enumerates.
std::size_t count_neurons(const ModelGraph& g);

/// Brute-force reference: enumerates every (i, j) pair of every conv/dense
/// node with nested loops and applies the rule formulas directly. Supports
/// conv, dense, relu, flatten and add; limited to 32 neurons.
OracleAttribution oracle_attribute(const ActivationTrace& trace, const ConditionSet& cond, const RuleComposite& rules,
                                   const InitSpec& init, bool normalize_per_layer = false);

}  // namespace crp
