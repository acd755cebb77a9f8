#pragma once

#include <stdexcept>
#include <string>

namespace crp {

/// Error classes map onto CLI exit codes and HTTP statuses.
enum class ErrorKind {
  usage,              // bad arguments / request shape
  format,             // unparsable or inconsistent files
  shape,              // tensor shape contract violated
  compute,            // numerical or graph-level failure during a computation
  not_found,          // unknown layer, channel, sample or index key
  invalid_condition,  // condition set does not fit the graph
  fingerprint,        // index built for different artifacts
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

const char* to_string(ErrorKind kind) noexcept;

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace crp
