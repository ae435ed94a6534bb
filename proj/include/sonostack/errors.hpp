#pragma once

#include <stdexcept>
#include <string>

namespace sonostack {

// Base class for all domain errors raised by the library. The CLI maps
// these to exit code 1; anything else escaping is a bug.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class DecodeError : public Error {
public:
    using Error::Error;
};

class UnsupportedFormat : public Error {
public:
    using Error::Error;
};

class InvalidLength : public Error {
public:
    using Error::Error;
};

class FilterbankError : public Error {
public:
    using Error::Error;
};

class StackError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DegenerateBatch : public Error {
public:
    using Error::Error;
};

class CheckpointError : public Error {
public:
    using Error::Error;
};

class DatasetError : public Error {
public:
    using Error::Error;
};

class PipelineError : public Error {
public:
    using Error::Error;
};

} // namespace sonostack
