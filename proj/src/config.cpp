#include "crp/config.hpp"

#include <cctype>
#include <charconv>

#include "crp/error.hpp"
#include "crp/model_io.hpp"

namespace crp {

namespace {

class LineParser {
 public:
  LineParser(const std::string& line, const std::string& where) : s_(line), where_(where) {}

  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
  }
  bool at_end() {
    skip_ws();
    return pos_ >= s_.size() || s_[pos_] == '#';
  }
  char peek() { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void expect(char c) {
    skip_ws();
    if (peek() != c) error(std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string key() {
    skip_ws();
    if (peek() == '"') return quoted();
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' || s_[pos_] == '-')) {
      ++pos_;
    }
    if (pos_ == start) error("expected a key");
    return s_.substr(start, pos_ - start);
  }

  std::string dotted_key() {
    std::string k = key();
    skip_ws();
    while (peek() == '.') {
      ++pos_;
      k += "." + key();
      skip_ws();
    }
    return k;
  }

  TomlValue value() {
    skip_ws();
    const char c = peek();
    if (c == '"') return quoted();
    if (c == '[') {
      ++pos_;
      std::vector<std::string> items;
      skip_ws();
      while (peek() != ']') {
        skip_ws();
        if (peek() != '"') error("arrays may only hold strings");
        items.push_back(quoted());
        skip_ws();
        if (peek() == ',') {
          ++pos_;
          skip_ws();
        } else if (peek() != ']') {
          error("expected ',' or ']'");
        }
      }
      ++pos_;
      return items;
    }
    if (s_.compare(pos_, 4, "true") == 0) {
      pos_ += 4;
      return true;
    }
    if (s_.compare(pos_, 5, "false") == 0) {
      pos_ += 5;
      return false;
    }
    const std::size_t start = pos_;
    while (pos_ < s_.size() && s_[pos_] != ' ' && s_[pos_] != '\t' && s_[pos_] != '#') ++pos_;
    std::string tok = s_.substr(start, pos_ - start);
    std::erase(tok, '_');
    if (tok.empty()) error("missing value");
    std::int64_t i = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), i);
    if (ec == std::errc() && p == tok.data() + tok.size()) return i;
    try {
      std::size_t used = 0;
      const double d = std::stod(tok, &used);
      if (used == tok.size()) return d;
    } catch (const std::exception&) {
    }
    error("cannot parse value '" + tok + "'");
  }

  [[noreturn]] void error(const std::string& what) { fail(ErrorKind::format, where_ + ": " + what); }

 private:
  std::string quoted() {
    ++pos_;  // opening quote
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      char c = s_[pos_++];
      if (c == '\\') {
        if (pos_ >= s_.size()) break;
        const char e = s_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: error(std::string("unsupported escape \\") + e);
        }
      }
      out += c;
    }
    if (pos_ >= s_.size()) error("unterminated string");
    ++pos_;
    return out;
  }

  const std::string& s_;
  std::string where_;
  std::size_t pos_ = 0;
};

template <typename T>
std::optional<T> get_as(const std::map<std::string, TomlValue>& values, const std::string& key,
                        const std::string& origin, const char* type) {
  auto it = values.find(key);
  if (it == values.end()) return std::nullopt;
  if (const T* v = std::get_if<T>(&it->second)) return *v;
  fail(ErrorKind::format, origin + ": '" + key + "' must be " + type);
}

}  // namespace

TomlDocument TomlDocument::parse(const std::string& text, const std::string& origin) {
  TomlDocument doc;
  doc.origin_ = origin;
  std::string table;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    start = end + 1;
    ++line_no;
    LineParser p(line, origin + ":" + std::to_string(line_no));
    if (p.at_end()) continue;
    if (p.peek() == '[') {
      p.expect('[');
      table = p.dotted_key();
      p.expect(']');
      if (!p.at_end()) p.error("unexpected text after table header");
      continue;
    }
    const std::string k = p.dotted_key();
    p.expect('=');
    TomlValue v = p.value();
    if (!p.at_end()) p.error("unexpected text after value");
    const std::string full = table.empty() ? k : table + "." + k;
    if (doc.values_.count(full)) p.error("duplicate key '" + full + "'");
    doc.values_[full] = std::move(v);
  }
  return doc;
}

TomlDocument TomlDocument::load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse(std::string(bytes.begin(), bytes.end()), path.string());
}

std::optional<std::string> TomlDocument::string(const std::string& key) const {
  return get_as<std::string>(values_, key, origin_, "a string");
}

std::optional<std::int64_t> TomlDocument::integer(const std::string& key) const {
  return get_as<std::int64_t>(values_, key, origin_, "an integer");
}

std::optional<double> TomlDocument::number(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  if (const auto* i = std::get_if<std::int64_t>(&it->second)) return static_cast<double>(*i);
  return get_as<double>(values_, key, origin_, "a number");
}

std::optional<bool> TomlDocument::boolean(const std::string& key) const {
  return get_as<bool>(values_, key, origin_, "a boolean");
}

std::optional<std::vector<std::string>> TomlDocument::strings(const std::string& key) const {
  return get_as<std::vector<std::string>>(values_, key, origin_, "an array of strings");
}

std::vector<std::string> TomlDocument::keys(const std::string& table) const {
  std::vector<std::string> out;
  const std::string prefix = table + ".";
  for (const auto& [k, v] : values_) {
    if (k.rfind(prefix, 0) == 0 && k.find('.', prefix.size()) == std::string::npos) out.push_back(k.substr(prefix.size()));
  }
  return out;
}

RunConfig RunConfig::from_toml(const TomlDocument& doc) {
  RunConfig c;
  if (auto v = doc.string("model.manifest")) c.manifest = *v;
  if (auto v = doc.string("model.weights")) c.weights = *v;
  if (auto v = doc.string("data.path")) c.dataset = *v;
  if (auto v = doc.string("data.index")) c.index = *v;
  if (auto v = doc.string("attribution.composite")) c.composite = *v;
  if (auto v = doc.number("attribution.epsilon")) c.epsilon = *v;
  if (auto v = doc.boolean("attribution.normalize")) c.normalize = *v;
  for (const auto& k : doc.keys("attribution.overrides")) c.rule_overrides[k] = *doc.string("attribution.overrides." + k);
  if (auto v = doc.integer("run.workers")) {
    if (*v < 0) fail(ErrorKind::usage, "run.workers must be non-negative");
    c.workers = static_cast<std::size_t>(*v);
  }
  if (auto v = doc.string("run.output")) c.output_dir = *v;
  if (auto v = doc.integer("run.seed")) c.seed = static_cast<std::uint64_t>(*v);
  return c;
}

}  // namespace crp
