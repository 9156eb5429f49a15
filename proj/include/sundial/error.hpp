#pragma once

#include <stdexcept>
#include <string>

namespace sundial {

// Root of the library's exception hierarchy. Everything thrown on purpose
// derives from this, so callers can catch one type at the boundary.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes incompatible with the requested operation.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// A documented precondition of an operation was violated by the caller.
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Malformed or unusable input data (series too short, empty corpus, ...).
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

// Syntactic parse failures; carries a line number when one is known.
class ParseError : public Error {
public:
    ParseError(const std::string& msg, long line = -1)
        : Error(line >= 0 ? "line " + std::to_string(line) + ": " + msg : msg),
          line_(line) {}
    long line() const { return line_; }

private:
    long line_;
};

// Unreadable, truncated, or mismatched checkpoint files.
class CheckpointError : public Error {
public:
    explicit CheckpointError(const std::string& msg) : Error(msg) {}
};

// An object was used in a state that does not permit the call
// (e.g. a KV cache fed tokens out of order).
class StateError : public Error {
public:
    explicit StateError(const std::string& msg) : Error(msg) {}
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Training-loop level failures (diverged loss, bad batch spec, ...).
class TrainError : public Error {
public:
    explicit TrainError(const std::string& msg) : Error(msg) {}
};

}  // namespace sundial
