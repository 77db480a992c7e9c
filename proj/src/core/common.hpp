#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace colidr {

// Library version reported in run manifests and the C API.
inline constexpr const char* kVersion = "0.2.0";

// All recoverable failures surface as Error; the C API translates the
// category into a status code.
enum class ErrorKind {
  InvalidArgument,
  ShapeMismatch,
  Io,
  Format,
  Numeric,
  Unsatisfiable,
  Internal,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

}  // namespace colidr

// CHECK-style guard: CLDR_CHECK(cond, ErrorKind::ShapeMismatch, "op " << name);
#define CLDR_CHECK(cond, kind, stream_expr)            \
  do {                                                 \
    if (!(cond)) {                                     \
      std::ostringstream oss_;                         \
      oss_ << stream_expr;                             \
      ::colidr::fail((kind), oss_.str());              \
    }                                                  \
  } while (0)
