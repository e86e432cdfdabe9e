#pragma once

#include <stdexcept>
#include <string>

namespace sinsemi {

// Invalid configuration, bad arguments, or geometry mismatches.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values during training or integration.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Unreadable or unwritable files, corrupt containers.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace sinsemi
