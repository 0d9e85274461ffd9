#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kdlora {

inline constexpr const char* kVersion = "0.1.0";

/// Base of the error taxonomy. Every failure carries a stable machine-readable
/// code so the CLI can emit single-line parsable diagnostics.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error("dimension_error", m) {}
};

class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& m) : Error("parameter_error", m) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& m) : Error("data_error", m) {}
};

class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& m) : Error("schema_error", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config_error", m) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& m) : Error("state_error", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io_error", m) {}
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
inline std::size_t& math_threads_ref() {
  static std::size_t n = [] {
    const char* env = std::getenv("KDLORA_THREADS");
    if (env == nullptr) return std::size_t{1};
    long v = std::strtol(env, nullptr, 10);
    return v > 1 ? static_cast<std::size_t>(v) : std::size_t{1};
  }();
  return n;
}
}  // namespace detail

/// Upper bound on threads used inside matmul kernels. Everything else is
/// single-threaded. Initialized from KDLORA_THREADS, defaults to 1.
inline std::size_t math_threads() { return detail::math_threads_ref(); }

inline void set_math_threads(std::size_t n) {
  detail::math_threads_ref() = n > 1 ? n : 1;
}

/// Temporarily pins math parallelism (benchmarks run with 1 thread).
class ScopedMathThreads {
 public:
  explicit ScopedMathThreads(std::size_t n) : prev_(math_threads()) {
    set_math_threads(n);
  }
  ~ScopedMathThreads() { set_math_threads(prev_); }
  ScopedMathThreads(const ScopedMathThreads&) = delete;
  ScopedMathThreads& operator=(const ScopedMathThreads&) = delete;

 private:
  std::size_t prev_;
};

}  // namespace kdlora
