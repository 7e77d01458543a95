#pragma once

#include <stdexcept>
#include <string>

namespace unionret {

// Input violates a documented precondition or invariant (bad shapes, duplicate
// ids, out-of-range parameters). The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A file could not be opened, read, written, or parsed. The CLI maps this to
// exit code 2.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace unionret
