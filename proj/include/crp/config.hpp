#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace crp {

using TomlValue = std::variant<std::string, std::int64_t, double, bool, std::vector<std::string>>;

/// Flat view of a TOML document: "table.key" -> value. Supports tables,
/// dotted table headers, strings, integers, floats, booleans, string arrays
/// and comments; enough for run configuration files.
class TomlDocument {
 public:
  static TomlDocument parse(const std::string& text, const std::string& origin = "config");
  static TomlDocument load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> string(const std::string& key) const;
  std::optional<std::int64_t> integer(const std::string& key) const;
  std::optional<double> number(const std::string& key) const;
  std::optional<bool> boolean(const std::string& key) const;
  std::optional<std::vector<std::string>> strings(const std::string& key) const;
  /// Keys directly under `table` (without the prefix).
  std::vector<std::string> keys(const std::string& table) const;

 private:
  std::map<std::string, TomlValue> values_;
  std::string origin_;
};

/// Settings shared by every command; flags override the file.
struct RunConfig {
  std::string manifest;
  std::string weights;
  std::string dataset;
  std::string index;
  std::string composite = "epsilon_zplus_flat";
  std::optional<double> epsilon;
  std::map<std::string, std::string> rule_overrides;
  bool normalize = false;
  std::size_t workers = 0;  // 0 = default_workers()
  std::string output_dir;
  std::uint64_t seed = 0;

  /// Reads [model], [data], [attribution], [attribution.overrides] and [run].
  static RunConfig from_toml(const TomlDocument& doc);
};

}  // namespace crp
