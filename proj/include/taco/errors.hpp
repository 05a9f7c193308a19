#pragma once

#include <stdexcept>
#include <string>

namespace taco {

// Bad inputs: malformed files, inconsistent configs, violated preconditions.
// The command-line layer maps this to exit code 1.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// The environment failed mid-run: I/O faults, transport errors, non-finite
// losses. The command-line layer maps this to exit code 2.
struct RuntimeFailure : std::runtime_error {
  explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace taco
