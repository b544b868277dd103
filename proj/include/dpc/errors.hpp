#pragma once

#include <stdexcept>
#include <string>

namespace dpc {

// Exit-code mapping for the CLI: UsageError -> 1, DataError -> 2,
// InternalError -> 3.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InternalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace dpc
