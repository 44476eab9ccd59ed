#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace unidec {

// Invalid user configuration. The CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Failure after configuration was accepted (I/O, divergence, missing files).
// The CLI maps this to exit code 3.
struct RuntimeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A documented precondition was broken by calling code.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace unidec
