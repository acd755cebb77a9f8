#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include "crp/fixtures.hpp"

namespace crp::oracle {

/// Input positions along one axis that reach `position` of the last stage,
/// clipped to the valid extent at every stage.
inline std::set<std::size_t> field_1d(std::size_t input_extent, const std::vector<ConvStage>& stages,
                                      std::size_t position) {
  std::vector<std::size_t> extents{input_extent};
  for (const auto& s : stages) extents.push_back((extents.back() + 2 * s.padding - s.kernel) / s.stride + 1);
  std::set<std::size_t> cur{position};
  for (std::size_t l = stages.size(); l-- > 0;) {
    const auto& s = stages[l];
    std::set<std::size_t> prev;
    for (std::size_t o : cur) {
      for (std::size_t t = 0; t < s.kernel; ++t) {
        const long i = static_cast<long>(o * s.stride + t) - static_cast<long>(s.padding);
        if (i >= 0 && i < static_cast<long>(extents[l])) prev.insert(static_cast<std::size_t>(i));
      }
    }
    cur = std::move(prev);
  }
  return cur;
}

/// (H, W) mask of the analytic receptive field of neuron (p, q) after `stages`.
inline std::vector<std::uint8_t> field_mask(std::size_t H, std::size_t W, const std::vector<ConvStage>& stages,
                                            std::size_t p, std::size_t q) {
  const auto rows = field_1d(H, stages, p), cols = field_1d(W, stages, q);
  std::vector<std::uint8_t> m(H * W, 0);
  for (auto y : rows) {
    for (auto x : cols) m[y * W + x] = 1;
  }
  return m;
}

/// Output extent of a conv stack along one axis.
inline std::size_t stack_extent(std::size_t input_extent, const std::vector<ConvStage>& stages) {
  std::size_t n = input_extent;
  for (const auto& s : stages) n = (n + 2 * s.padding - s.kernel) / s.stride + 1;
  return n;
}

}  // namespace crp::oracle
