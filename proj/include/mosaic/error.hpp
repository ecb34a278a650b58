#pragma once

#include <concepts>
#include <stdexcept>
#include <string>
#include <utility>

namespace mosaic {

/// Thrown when a caller breaks an operation's precondition (bad shape,
/// out-of-range timestep, non-positive temperature, ...).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Thrown when a computation produces non-finite values. The message names
/// the layer or sampler step where it was first observed.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or unreadable files.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractViolation(what);
}

/// Same, with the message built only on failure.
template <std::invocable F>
inline void require(bool cond, F&& what) {
    if (!cond) throw ContractViolation(std::forward<F>(what)());
}

}  // namespace mosaic
