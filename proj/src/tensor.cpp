#include "crp/tensor.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace crp {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::format: return "format";
    case ErrorKind::shape: return "shape";
    case ErrorKind::compute: return "compute";
    case ErrorKind::not_found: return "not_found";
    case ErrorKind::invalid_condition: return "invalid_condition";
    case ErrorKind::fingerprint: return "fingerprint";
  }
  return "unknown";
}

std::size_t shape_product(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

BoolMask::BoolMask(Shape s, bool fill) : shape(std::move(s)), bits(shape_product(shape), fill ? 1 : 0) {}

BoolMask::BoolMask(Shape s, std::vector<std::uint8_t> b) : shape(std::move(s)), bits(std::move(b)) {
  if (shape_product(shape) != bits.size()) {
    fail(ErrorKind::shape, "mask length does not match shape " + shape_to_string(shape));
  }
}

std::size_t BoolMask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

BoolMask BoolMask::complement() const {
  BoolMask m = *this;
  for (auto& b : m.bits) b = b ? 0 : 1;
  return m;
}

template <typename T>
std::vector<double> channel_reduce(const BasicTensor<T>& t, SpatialReduce mode) {
  const std::size_t channels = t.channels();
  const std::size_t stride = t.channel_stride();
  std::vector<double> out(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const auto ch = t.channel(c);
    if (mode == SpatialReduce::sum) {
      double acc = 0.0;
      for (std::size_t i = 0; i < stride; ++i) acc += static_cast<double>(ch[i]);
      out[c] = acc;
    } else {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < stride; ++i) m = std::max(m, static_cast<double>(ch[i]));
      out[c] = m;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> reduce_spatial(const BasicTensor<T>& t, SpatialReduce mode) {
  if (t.rank() != 3) {
    fail(ErrorKind::shape, "reduce_spatial expects a rank-3 tensor, got " + shape_to_string(t.shape()));
  }
  const auto r = channel_reduce(t, mode);
  std::vector<T> out(r.size());
  for (std::size_t c = 0; c < r.size(); ++c) out[c] = static_cast<T>(r[c]);
  return BasicTensor<T>({r.size()}, std::move(out));
}

template <typename T>
double masked_sum(const BasicTensor<T>& t, const BoolMask& mask) {
  double acc = 0.0;
  if (mask.shape == t.shape()) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (mask.bits[i]) acc += static_cast<double>(t[i]);
    }
    return acc;
  }
  if (t.rank() == 3 && mask.shape == Shape{t.extent(1), t.extent(2)}) {
    const std::size_t plane = mask.size();
    for (std::size_t c = 0; c < t.extent(0); ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        if (mask.bits[i]) acc += static_cast<double>(t[c * plane + i]);
      }
    }
    return acc;
  }
  fail(ErrorKind::shape, "mask shape " + shape_to_string(mask.shape) + " incompatible with tensor " +
                             shape_to_string(t.shape()));
}

template <typename T>
double sum(const BasicTensor<T>& t) {
  double acc = 0.0;
  for (const T& v : t.data()) acc += static_cast<double>(v);
  return acc;
}

Tensor64 sum_channels(const Tensor64& t) {
  if (t.rank() != 3) fail(ErrorKind::shape, "sum_channels expects (C,H,W), got " + shape_to_string(t.shape()));
  const std::size_t plane = t.extent(1) * t.extent(2);
  Tensor64 out({t.extent(1), t.extent(2)});
  for (std::size_t c = 0; c < t.extent(0); ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[i] += t[c * plane + i];
  }
  return out;
}

#define CRP_INSTANTIATE(T)                                                              \
  template std::vector<double> channel_reduce<T>(const BasicTensor<T>&, SpatialReduce); \
  template BasicTensor<T> reduce_spatial<T>(const BasicTensor<T>&, SpatialReduce);      \
  template double masked_sum<T>(const BasicTensor<T>&, const BoolMask&);                \
  template double sum<T>(const BasicTensor<T>&);

CRP_INSTANTIATE(float)
CRP_INSTANTIATE(double)
CRP_INSTANTIATE(std::int32_t)

#undef CRP_INSTANTIATE

}  // namespace crp
