#pragma once

#include <stdexcept>
#include <string>

namespace maskcount {

/// Failure categories; the CLI maps these onto process exit codes.
enum class ErrorKind {
    invalid_argument,
    config,
    missing_prerequisite,
    numeric,
    parse,
    io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(const std::string& what) {
    throw Error(ErrorKind::invalid_argument, what);
}

inline void require(bool cond, const std::string& what) {
    if (!cond) fail(what);
}

} // namespace maskcount
