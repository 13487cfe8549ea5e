#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace pkgnet {

// Base for every error raised by the library. The CLI maps `kind()` onto the
// machine-parsable error line it prints.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message, std::string kind = "error")
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations);

  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  std::vector<std::string> violations_;
};

}  // namespace pkgnet
