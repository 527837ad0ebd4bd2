#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deop {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/dimension mismatch between operands.
struct ShapeError : Error {
    using Error::Error;
};

// NaN/Inf escaped from an operation.
struct NumericError : Error {
    using Error::Error;
};

// Caller violated an operation precondition.
struct ContractError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Training data contains labels it must not (zero-shot split violation).
struct ProtocolError : Error {
    using Error::Error;
};

// More ground-truth segments than the network has capacity for.
struct CapacityError : Error {
    using Error::Error;
};

// Sample synthesis could not satisfy its constraints.
struct GenerationError : Error {
    using Error::Error;
};

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

}  // namespace deop
