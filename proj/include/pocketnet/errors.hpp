#pragma once

#include <stdexcept>

namespace pocketnet {

// Exit-code contract for the CLI: UsageError -> 1, DataError -> 2, NumericError -> 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed files, shape mismatches, inconsistent configurations.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite losses, degenerate normalizations, failed numeric checks.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace pocketnet
