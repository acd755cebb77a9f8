#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "crp/model_io.hpp"

static_assert(std::endian::native == std::endian::little, "CRPW I/O assumes a little-endian host");

namespace crp {

namespace {

constexpr char kMagic[4] = {'C', 'R', 'P', 'W'};
constexpr std::uint32_t kVersion = 1;

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::i32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  fail(ErrorKind::format, "unknown dtype");
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos + n > bytes.size()) fail(ErrorKind::format, "truncated CRPW container");
  }

  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
};

template <typename T>
AnyTensor make_tensor(Shape shape, const std::uint8_t* src, std::size_t count) {
  std::vector<T> data(count);
  std::memcpy(data.data(), src, count * sizeof(T));
  return BasicTensor<T>(std::move(shape), std::move(data));
}

}  // namespace

DType dtype_of(const AnyTensor& t) {
  switch (t.index()) {
    case 0: return DType::f32;
    case 1: return DType::i32;
    case 2: return DType::f64;
    default: return DType::u8;
  }
}

const Shape& shape_of(const AnyTensor& t) {
  return std::visit([](const auto& x) -> const Shape& { return x.shape(); }, t);
}

void Blob::add(std::string name, AnyTensor tensor) {
  if (name.empty() || name.size() > 0xFFFF) fail(ErrorKind::format, "invalid tensor name length");
  if (index_.count(name)) fail(ErrorKind::format, "duplicate tensor " + name);
  index_[name] = entries_.size();
  entries_.push_back({std::move(name), std::move(tensor)});
}

bool Blob::contains(const std::string& name) const { return index_.count(name) != 0; }

const AnyTensor* Blob::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second].tensor;
}

std::vector<std::uint8_t> encode_blob(const Blob& blob) {
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(blob.size()));

  std::size_t header = 12;
  for (const auto& e : blob.entries()) header += 2 + e.name.size() + 2 + 4 * shape_of(e.tensor).size() + 8;

  std::uint64_t offset = header;
  for (const auto& e : blob.entries()) {
    const Shape& shape = shape_of(e.tensor);
    if (shape.size() > 255) fail(ErrorKind::format, "tensor rank too large: " + e.name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name.data(), e.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype_of(e.tensor)));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t ext : shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(ext));
    w.put<std::uint64_t>(offset);
    offset += shape_product(shape) * dtype_size(dtype_of(e.tensor));
  }
  for (const auto& e : blob.entries()) {
    std::visit([&](const auto& t) { w.put_bytes(t.data().data(), t.size() * sizeof(t[0])); }, e.tensor);
  }
  return std::move(w.out);
}

Blob decode_blob(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(ErrorKind::format, "bad magic: not a CRPW container");
  r.pos = 4;
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) fail(ErrorKind::format, "unsupported CRPW version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();

  Blob blob;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>();
    std::string name = r.get_string(name_len);
    const auto dtype_raw = r.get<std::uint8_t>();
    if (dtype_raw > 3) fail(ErrorKind::format, "tensor " + name + ": unknown dtype " + std::to_string(dtype_raw));
    const auto dtype = static_cast<DType>(dtype_raw);
    const auto rank = r.get<std::uint8_t>();
    if (rank == 0) fail(ErrorKind::format, "tensor " + name + ": rank 0");
    Shape shape(rank);
    for (auto& e : shape) {
      e = r.get<std::uint32_t>();
      if (e == 0) fail(ErrorKind::format, "tensor " + name + ": zero extent");
    }
    const auto offset = r.get<std::uint64_t>();
    const std::size_t count_elems = shape_product(shape);
    const std::size_t nbytes = count_elems * dtype_size(dtype);
    if (offset > bytes.size() || nbytes > bytes.size() - offset) {
      fail(ErrorKind::format, "tensor " + name + ": payload out of bounds");
    }
    const std::uint8_t* src = bytes.data() + offset;
    AnyTensor t;
    switch (dtype) {
      case DType::f32: t = make_tensor<float>(shape, src, count_elems); break;
      case DType::i32: t = make_tensor<std::int32_t>(shape, src, count_elems); break;
      case DType::f64: t = make_tensor<double>(shape, src, count_elems); break;
      case DType::u8: t = make_tensor<std::uint8_t>(shape, src, count_elems); break;
    }
    blob.add(std::move(name), std::move(t));
  }
  return blob;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::format, "cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::format, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::format, "cannot write " + path.string());
  out << text;
}

Blob read_blob(const std::filesystem::path& path) {
  try {
    return decode_blob(read_file_bytes(path));
  } catch (const Error& e) {
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

void write_blob(const std::filesystem::path& path, const Blob& blob) { write_file_bytes(path, encode_blob(blob)); }

std::string fingerprint(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string fingerprint(const std::string& text) {
  return fingerprint(std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace crp
