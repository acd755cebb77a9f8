#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crp/tensor.hpp"

namespace crp {

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB
};

/// 8-bit single-channel image: palette indices for indexed PNGs, gray values otherwise.
struct IndexedImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> values;
};

/// Blue (-1) / white (0) / red (+1) after dividing by max |value|. Input (H, W).
RgbImage heatmap_image(const Tensor64& map);

/// Sample tensor (1 or 3 channels, H, W) scaled to [0, 255] by its own min/max.
RgbImage sample_image(const Tensor& sample);

std::vector<std::uint8_t> encode_png(const RgbImage& img);
void write_png(const std::filesystem::path& path, const RgbImage& img);

/// Reads an 8-bit indexed or gray PNG without palette expansion.
IndexedImage read_indexed_png(const std::filesystem::path& path);
void write_indexed_png(const std::filesystem::path& path, const IndexedImage& img);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

}  // namespace crp
