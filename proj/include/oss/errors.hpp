#pragma once

#include <stdexcept>
#include <string>

namespace oss {

/// Invalid configuration value (out-of-range ratio, unknown enum, bad key).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A required file is missing or unreadable.
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A file exists but its content does not match the expected format.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A triple references a name absent from the supplied vocabulary.
struct VocabError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor/parameter shapes disagree.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Internal contract violation (caller bug).
struct LogicError : std::logic_error {
    using std::logic_error::logic_error;
};

} // namespace oss
