#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace spin {

// Base of every error thrown by the library. The CLI maps the subclasses
// below onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration: bad values, conflicting sections, unknown keys.
class ConfigError : public Error {
public:
    using Error::Error;
};

class ConfigFileMissing : public ConfigError {
public:
    explicit ConfigFileMissing(const std::string& path)
        : ConfigError("config file not found: " + path), path_(path) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

class ConfigSyntaxError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

// A value violates an invariant. `key()` is the dotted path of the
// offending entry, e.g. "spin.r".
class ConfigValueError : public ConfigError {
public:
    ConfigValueError(std::string key, const std::string& what)
        : ConfigError(key + ": " + what), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

// Malformed input data (checkpoint, corpus, vocab, traces).
class DataError : public Error {
public:
    using Error::Error;
    DataError(const std::string& file, std::size_t line, const std::string& what)
        : Error(file + ":" + std::to_string(line) + ": " + what) {}
};

class ShapeError : public DataError {
public:
    using DataError::DataError;
};

// Vision span does not lie inside the cached sequence.
class SpanError : public Error {
public:
    using Error::Error;
};

// The sequence would exceed max_seq_len.
class GenerationLengthError : public Error {
public:
    using Error::Error;
};

}  // namespace spin
