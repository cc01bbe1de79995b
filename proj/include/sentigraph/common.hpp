#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace sg {

// Bad or inconsistent input data (corrupt JSON, offsets outside the text,
// unknown polarity strings, checkpoint format mismatches). CLI exit code 2.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite losses, failed gradient checks and similar. CLI exit code 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

}  // namespace sg
