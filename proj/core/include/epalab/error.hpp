#pragma once

#include <stdexcept>
#include <string>

namespace epalab {

enum class ErrorKind {
  Config,     // invalid parameters or incompatible settings
  Data,       // malformed records, constraint violations on inputs
  Shape,      // dimension mismatch between tables
  EmptySupport,
  Io,
  Integrity,  // stored hash does not match content
  Check,      // a numerical self-check failed (e.g. non-deterministic evaluator)
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace epalab
