#pragma once

#include <stdexcept>
#include <string>

namespace maskts {

// Violated precondition or domain contract. Maps to CLI exit code 1.
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shape mismatch; a flavor of contract violation.
class ShapeError : public ContractError {
public:
    explicit ShapeError(const std::string& what) : ContractError(what) {}
};

// Malformed, truncated or unreadable file. Maps to CLI exit code 2.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace maskts
