#pragma once

#include <stdexcept>
#include <string>

namespace vfamc {

enum class ErrorKind { Config, Geometry, Numerical, Io };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

struct GeometryError : Error {
    explicit GeometryError(const std::string& what) : Error(ErrorKind::Geometry, what) {}
};

struct NumericalError : Error {
    explicit NumericalError(const std::string& what) : Error(ErrorKind::Numerical, what) {}
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

// Rethrows `e` with `context` prepended, keeping its kind.
[[noreturn]] void rethrow_with_context(const Error& e, const std::string& context);

// Process exit codes used by the command line front-end.
int exit_code(ErrorKind kind) noexcept;

}  // namespace vfamc
