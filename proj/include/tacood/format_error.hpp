#pragma once

#include <stdexcept>

namespace tacood {

// Malformed or truncated serialized data.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tacood
