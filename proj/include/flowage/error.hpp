#pragma once

#include <stdexcept>
#include <string>

namespace flowage {

// Bad input: shapes, ranges, malformed files, unknown flags. CLI exit code 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// NaN/Inf during a computation, singular systems, rank deficiency. CLI exit code 2.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what)
{
    if (!ok) throw ValidationError(what);
}

} // namespace detail
} // namespace flowage
