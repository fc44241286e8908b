#pragma once

#include <stdexcept>
#include <string>

namespace prism {

enum class ErrorCategory { usage, config, data, io, numeric, state };

inline const char* category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::usage: return "usage";
    case ErrorCategory::config: return "config";
    case ErrorCategory::data: return "data";
    case ErrorCategory::io: return "io";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::state: return "state";
  }
  return "unknown";
}

// Error carrying a machine-readable category; the CLI prints it as
// "error: <category>: <message>".
class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}
  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

inline Error data_error(const std::string& m) { return Error(ErrorCategory::data, m); }
inline Error config_error(const std::string& m) { return Error(ErrorCategory::config, m); }
inline Error io_error(const std::string& m) { return Error(ErrorCategory::io, m); }

}  // namespace prism
