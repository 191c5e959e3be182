#pragma once

#include <stdexcept>
#include <string>

namespace isa {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/axis mismatch between operands.
class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Caller violated an operation precondition.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Numerically degenerate input (zero norms, non-finite probes, ...).
class DegenerateInputError : public Error {
public:
    explicit DegenerateInputError(const std::string& msg) : Error(msg) {}
};

// A mask with no foreground or no background after downsampling.
class DegenerateMaskError : public DegenerateInputError {
public:
    explicit DegenerateMaskError(const std::string& msg) : DegenerateInputError(msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

class TrainingFailureError : public Error {
public:
    explicit TrainingFailureError(const std::string& msg) : Error(msg) {}
};

}  // namespace isa
