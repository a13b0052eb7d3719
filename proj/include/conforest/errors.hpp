#pragma once

#include <stdexcept>
#include <string>

namespace conforest {

// Error categories map 1:1 onto CLI exit codes (see tools/).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MissingArtifactError : std::runtime_error {
  explicit MissingArtifactError(const std::string& msg)
      : std::runtime_error(msg) {}
};

}  // namespace conforest
