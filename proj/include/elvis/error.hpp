#pragma once

#include <stdexcept>
#include <string>

namespace elvis {

// Every failure the library reports derives from Error. The CLI maps the
// concrete type onto a process exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shapes or lengths that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Malformed files: bad magic, truncated payloads, unparseable JSON lines.
class FormatError : public Error {
public:
    using Error::Error;
};

// Lookup of an id that is not present.
class NotFoundError : public Error {
public:
    using Error::Error;
};

// NaN/Inf where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Invalid configuration or arguments.
class UsageError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace elvis
