#pragma once

#include <stdexcept>
#include <string>

namespace dtrattunet {

// Bad tensor shapes, non-finite inputs, malformed masks.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inconsistent model/train/run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Missing or unreadable files, orphan masks, broken checkpoints.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dtrattunet
