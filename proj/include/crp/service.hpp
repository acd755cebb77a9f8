#pragma once

#include <list>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

#include <json.hpp>

#include "crp/concepts.hpp"

namespace crp {

/// Immutable state a service answers from.
struct Session {
  ModelGraph model;
  DatasetContainer data;
  std::optional<ReferenceIndex> index;
  RuleComposite rules;
  bool normalize = false;
  std::size_t workers = 1;
};

/// Bounded least-recently-used map from request keys to response bodies.
class ResponseCache {
 public:
  explicit ResponseCache(std::size_t capacity) : capacity_(capacity) {}

  std::optional<std::string> get(const std::string& key);
  void put(const std::string& key, std::string value);
  std::size_t size() const;
  std::size_t hits() const;

 private:
  using Entry = std::pair<std::string, std::string>;
  mutable std::mutex mutex_;
  std::size_t capacity_;
  std::list<Entry> order_;  // most recent first
  std::unordered_map<std::string, std::list<Entry>::iterator> lookup_;
  std::size_t hits_ = 0;
};

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/// HTTP-independent request handling. Every endpoint is also callable
/// directly with a JSON request; the CLI uses the same builders so both
/// surfaces produce identical documents.
class Service {
 public:
  using json = nlohmann::json;

  explicit Service(Session session, std::size_t cache_entries = 256);

  const Session& session() const noexcept { return session_; }
  const ResponseCache& cache() const noexcept { return cache_; }

  /// Dispatches one request; never throws.
  HttpResponse handle(const std::string& method, const std::string& path,
                      const std::map<std::string, std::string>& query, const std::string& body);

  json predict(const json& req) const;
  json attribute(const json& req) const;
  json concepts(const std::string& layer, const json& req) const;
  json references(const std::string& layer, std::size_t channel, const json& req) const;
  json region(const json& req) const;
  json atlas(const json& req) const;
  json graph(const json& req) const;
  json flip(const json& req) const;
  json blend(const json& req) const;
  json meta() const;

  /// Heatmap as a CRPW container holding the f64 tensor "heatmap" (H, W).
  static std::vector<std::uint8_t> heatmap_blob(const Tensor64& map);

 private:
  Session session_;
  ResponseCache cache_;
};

/// OpenAPI 3 description of the endpoints.
const std::string& openapi_document();

int http_status(ErrorKind kind) noexcept;

/// Serves until the process is stopped.
void run_http_server(Service& service, const std::string& bind, int port);

}  // namespace crp
