#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "crp/tensor.hpp"

namespace crp {

// ---------------------------------------------------------------------------
// CRPW binary container
//
//   "CRPW" | u32 version=1 | u32 tensor count
//   per tensor: u16 name length, UTF-8 name, u8 dtype, u8 rank,
//               u32 extents[rank], u64 absolute data offset
//   tensor payloads, little-endian, row-major, in header order
// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { f32 = 0, i32 = 1, f64 = 2, u8 = 3 };

using AnyTensor = std::variant<Tensor, IntTensor, Tensor64, ByteTensor>;

DType dtype_of(const AnyTensor& t);
const Shape& shape_of(const AnyTensor& t);

class Blob {
 public:
  struct Entry {
    std::string name;
    AnyTensor tensor;
  };

  void add(std::string name, AnyTensor tensor);
  bool contains(const std::string& name) const;
  const AnyTensor* find(const std::string& name) const;

  /// Typed access; throws a format error if absent or of another dtype.
  template <typename T>
  const T& get(const std::string& name) const {
    const AnyTensor* t = find(name);
    if (t == nullptr) fail(ErrorKind::format, "missing tensor " + name);
    if (const T* typed = std::get_if<T>(t)) return *typed;
    fail(ErrorKind::format, "tensor " + name + " has unexpected dtype");
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

std::vector<std::uint8_t> encode_blob(const Blob& blob);
Blob decode_blob(const std::vector<std::uint8_t>& bytes);
Blob read_blob(const std::filesystem::path& path);
void write_blob(const std::filesystem::path& path, const Blob& blob);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// FNV-1a 64-bit digest rendered as 16 hex digits.
std::string fingerprint(const std::vector<std::uint8_t>& bytes);
std::string fingerprint(const std::string& text);

// ---------------------------------------------------------------------------
// Model graph
// ---------------------------------------------------------------------------

enum class LayerKind { input, conv2d, conv1d, dense, relu, maxpool2d, avgpool2d, flatten, add, batchnorm };

const char* to_string(LayerKind kind) noexcept;
LayerKind layer_kind_from_string(const std::string& s);

inline bool is_linear(LayerKind k) noexcept {
  return k == LayerKind::conv2d || k == LayerKind::conv1d || k == LayerKind::dense;
}
inline bool is_conv(LayerKind k) noexcept { return k == LayerKind::conv2d || k == LayerKind::conv1d; }
inline bool is_pool(LayerKind k) noexcept { return k == LayerKind::maxpool2d || k == LayerKind::avgpool2d; }

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::relu;
  std::vector<std::string> inputs;

  // conv / pool geometry as (h, w); conv1d uses only the w component.
  std::array<std::size_t, 2> kernel{1, 1};
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};

  // conv: in/out channels; dense: in/out features
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;

  std::string weight;  // linear kinds
  std::string bias;    // optional

  // batchnorm
  std::string gamma, beta, mean, var;
  double bn_epsilon = 1e-5;
};

/// Weights of a linear node plus the 64-bit views the kernels read.
struct LinearParams {
  Tensor weight;  // conv (out, in, kh, kw); dense (out, in)
  Tensor bias;    // (out,)
  std::vector<double> w;      // weight as double, row-major [out][fan_in]
  std::vector<double> w_pos;  // max(w, 0)
  std::vector<double> w_neg;  // min(w, 0)
  std::vector<double> b;

  std::size_t fan_in() const { return weight.size() / weight.extent(0); }
  void refresh();
};

struct BatchNormParams {
  Tensor gamma, beta, mean, var;
};

struct Node {
  LayerSpec spec;
  Shape out_shape;
  std::vector<std::size_t> inputs;      // node indices
  std::vector<std::size_t> successors;  // node indices
  LinearParams linear;                  // linear kinds only
  BatchNormParams bn;                   // batchnorm only

  const std::string& id() const noexcept { return spec.id; }
  LayerKind kind() const noexcept { return spec.kind; }
};

/// Validated, topologically ordered layer graph. nodes()[0] is the input.
class ModelGraph {
 public:
  ModelGraph() = default;

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  std::size_t size() const noexcept { return nodes_.size(); }

  std::size_t index_of(const std::string& id) const;
  std::optional<std::size_t> find(const std::string& id) const;
  const Node& node(const std::string& id) const { return nodes_[index_of(id)]; }

  const Shape& input_shape() const { return nodes_.front().out_shape; }
  std::size_t output_index() const noexcept { return output_; }
  const Node& output() const { return nodes_[output_]; }
  std::size_t num_outputs() const { return output().out_shape[0]; }

  bool canonized() const noexcept { return canonized_; }
  const std::string& layout() const noexcept { return layout_; }

  /// True if `ancestor` lies on some path from the input into `node`
  /// (a node counts as its own ancestor).
  bool is_ancestor(std::size_t ancestor, std::size_t node) const;

  /// Builds and validates a graph from layer specs; `tensors` supplies weights.
  static ModelGraph build(std::string input_id, Shape input_shape, std::vector<LayerSpec> layers,
                          const Blob& tensors, std::string output_id = {}, std::string layout = "chw");

  std::vector<LayerSpec> layer_specs() const;
  Blob weight_blob() const;

  /// Canonical JSON manifest text (sorted keys, two-space indent, trailing newline).
  std::string manifest_json() const;

  /// Digest of the manifest and weight blob.
  std::string fingerprint() const;

 private:
  friend ModelGraph canonize(const ModelGraph& g);

  void rebuild_links();
  void infer_shapes();

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> index_;
  std::size_t output_ = 0;
  bool canonized_ = false;
  std::string layout_ = "chw";
};

ModelGraph load_model(const std::filesystem::path& manifest_path, const std::filesystem::path& weights_path);
ModelGraph parse_model(const std::string& manifest_json, const Blob& weights);
void save_model(const ModelGraph& g, const std::filesystem::path& manifest_path,
                const std::filesystem::path& weights_path);

/// Folds every batchnorm into the conv/dense node directly before it.
ModelGraph canonize(const ModelGraph& g);

// ---------------------------------------------------------------------------
// Dataset container (.crpd): tensors "sample/{i}", optional int32 "labels",
// optional u8 "meta/class_names" and "meta/provenance" (newline separated).
// ---------------------------------------------------------------------------

struct DatasetContainer {
  std::vector<Tensor> samples;
  std::optional<std::vector<std::int32_t>> labels;
  std::vector<std::string> class_names;
  std::vector<std::string> provenance;  // per sample, empty when unknown

  std::size_t size() const noexcept { return samples.size(); }
  const Tensor& sample(std::size_t i) const;
  const Shape& sample_shape() const { return samples.front().shape(); }

  void validate() const;
  /// Checks sample shape and label range against a model.
  void validate_against(const ModelGraph& g) const;

  Blob to_blob() const;
  std::string fingerprint() const;
};

DatasetContainer dataset_from_blob(const Blob& blob);
DatasetContainer load_dataset(const std::filesystem::path& path);
void save_dataset(const DatasetContainer& data, const std::filesystem::path& path);

/// Concatenates `b` after `a`; ids of `a` are unchanged, ids of `b` shift by
/// a.size(). Provenance becomes "<tag>:<original id>".
DatasetContainer merge_datasets(const DatasetContainer& a, const std::string& tag_a, const DatasetContainer& b,
                                const std::string& tag_b);

}  // namespace crp
