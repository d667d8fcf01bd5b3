#pragma once

#include <stdexcept>
#include <string>

namespace beamkd {

// Error taxonomy mirrored by the CLI exit codes:
//   ConfigError -> 2, IncompatibleArtifacts -> 3,
//   MissingPrerequisite -> 4, VerificationFailure -> 5.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IncompatibleArtifacts : std::runtime_error {
  explicit IncompatibleArtifacts(const std::string& msg) : std::runtime_error(msg) {}
};

struct MissingPrerequisite : std::runtime_error {
  explicit MissingPrerequisite(const std::string& msg) : std::runtime_error(msg) {}
};

struct VerificationFailure : std::runtime_error {
  explicit VerificationFailure(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace beamkd
