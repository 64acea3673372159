#pragma once

#include <stdexcept>
#include <string>

namespace emkv {

/// Raised for invalid parameters, mismatched grids and scheme violations.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw Error(message);
    }
}

}  // namespace emkv
