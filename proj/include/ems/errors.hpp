#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ems {

// Thrown when an input is structurally valid but numerically unusable
// (all-zero score mass, zero-norm vector where a direction is required).
class DegenerateInputError : public std::runtime_error {
public:
    explicit DegenerateInputError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown when an operation is invoked on a state that has not been set up
// (e.g. decode before prefill).
class StateError : public std::runtime_error {
public:
    explicit StateError(const std::string& what) : std::runtime_error(what) {}
};

// Thrown on malformed trace files; carries the byte offset of the problem.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t byte_offset)
        : std::runtime_error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::size_t offset;
};

// Thrown when internal cache structures reference nonexistent slots.
class CorruptionError : public std::runtime_error {
public:
    explicit CorruptionError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ems
