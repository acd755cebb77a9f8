#include "crp/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "crp/model_io.hpp"

namespace crp {

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); }

[[noreturn]] void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  *what = msg;
  png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

struct WriteBuffer {
  std::vector<std::uint8_t>* out;
};

void write_fn(png_structp png, png_bytep data, png_size_t n) {
  auto* buf = static_cast<WriteBuffer*>(png_get_io_ptr(png));
  buf->out->insert(buf->out->end(), data, data + n);
}

void flush_fn(png_structp) {}

struct ReadBuffer {
  const std::vector<std::uint8_t>* in;
  std::size_t pos = 0;
};

void read_fn(png_structp png, png_bytep data, png_size_t n) {
  auto* buf = static_cast<ReadBuffer*>(png_get_io_ptr(png));
  if (buf->pos + n > buf->in->size()) png_error(png, "truncated PNG");
  std::memcpy(data, buf->in->data() + buf->pos, n);
  buf->pos += n;
}

// color_type is PNG_COLOR_TYPE_RGB or PNG_COLOR_TYPE_GRAY
std::vector<std::uint8_t> encode(std::size_t width, std::size_t height, int color_type, const std::uint8_t* rows,
                                 std::size_t stride) {
  std::vector<std::uint8_t> out;
  std::string what;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &what, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) fail(ErrorKind::compute, "libpng initialization failed");
  WriteBuffer buf{&out};
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::compute, "PNG encoding failed: " + what);
  }
  png_set_write_fn(png, &buf, write_fn, flush_fn);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) png_write_row(png, const_cast<png_bytep>(rows + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

RgbImage heatmap_image(const Tensor64& map) {
  if (map.rank() != 2) fail(ErrorKind::shape, "heatmap must be (H, W), got " + shape_to_string(map.shape()));
  RgbImage img;
  img.height = map.extent(0);
  img.width = map.extent(1);
  img.pixels.resize(img.width * img.height * 3);
  double peak = 0.0;
  for (double v : map.data()) peak = std::max(peak, std::fabs(v));
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = peak > 0.0 ? map[i] / peak : 0.0;
    // white at 0, fading to pure red (+1) or pure blue (-1)
    const double fade = 255.0 * (1.0 - std::fabs(v));
    img.pixels[3 * i + 0] = to_byte(v >= 0 ? 255.0 : fade);
    img.pixels[3 * i + 1] = to_byte(fade);
    img.pixels[3 * i + 2] = to_byte(v <= 0 ? 255.0 : fade);
  }
  return img;
}

RgbImage sample_image(const Tensor& sample) {
  if (sample.rank() != 3 || (sample.extent(0) != 1 && sample.extent(0) != 3)) {
    fail(ErrorKind::shape, "sample image needs (1|3, H, W), got " + shape_to_string(sample.shape()));
  }
  const std::size_t C = sample.extent(0), H = sample.extent(1), W = sample.extent(2);
  RgbImage img{W, H, std::vector<std::uint8_t>(W * H * 3)};
  const auto [lo, hi] = std::minmax_element(sample.data().begin(), sample.data().end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  for (std::size_t p = 0; p < H * W; ++p) {
    for (std::size_t k = 0; k < 3; ++k) {
      const double v = sample[(C == 1 ? 0 : k) * H * W + p];
      img.pixels[3 * p + k] = to_byte(range > 0.0 ? 255.0 * (v - *lo) / range : 0.0);
    }
  }
  return img;
}

std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  if (img.width == 0 || img.height == 0) fail(ErrorKind::shape, "empty image");
  return encode(img.width, img.height, PNG_COLOR_TYPE_RGB, img.pixels.data(), img.width * 3);
}

void write_png(const std::filesystem::path& path, const RgbImage& img) {
  const auto bytes = encode_png(img);
  write_text_file(path, std::string(bytes.begin(), bytes.end()));
}

void write_indexed_png(const std::filesystem::path& path, const IndexedImage& img) {
  if (img.width == 0 || img.height == 0) fail(ErrorKind::shape, "empty image");
  const auto bytes = encode(img.width, img.height, PNG_COLOR_TYPE_GRAY, img.values.data(), img.width);
  write_text_file(path, std::string(bytes.begin(), bytes.end()));
}

IndexedImage read_indexed_png(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    fail(ErrorKind::format, path.string() + ": not a PNG file");
  }
  std::string what;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &what, png_error_fn, png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) fail(ErrorKind::compute, "libpng initialization failed");
  ReadBuffer buf{&bytes};
  IndexedImage img;
  std::string problem;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::format, path.string() + ": " + (problem.empty() ? what : problem));
  }
  png_set_read_fn(png, &buf, read_fn);
  png_read_info(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY) {
    problem = "region masks must be indexed or gray PNGs";
    png_error(png, problem.c_str());
  }
  if (depth < 8) png_set_packing(png);
  if (depth == 16) {
    problem = "16-bit region masks are not supported";
    png_error(png, problem.c_str());
  }
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.values.resize(img.width * img.height);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.values.data() + y * img.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    for (int s = 18; s >= 0; s -= 6) out += kAlphabet[(v >> s) & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  auto value = [](char c) -> int {
    const char* p = std::strchr(kAlphabet, c);
    return c != '\0' && p ? static_cast<int>(p - kAlphabet) : -1;
  };
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=') break;
    const int v = value(c);
    if (v < 0) fail(ErrorKind::format, "invalid base64 character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

}  // namespace crp
