#pragma once

#include <stdexcept>
#include <string>

namespace ropekv {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind { validation, numeric, io };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define ROPEKV_VALIDATION_ERROR(Name)                                                   \
    class Name : public Error {                                                          \
    public:                                                                              \
        explicit Name(const std::string& what) : Error(ErrorKind::validation, what) {}   \
    }

ROPEKV_VALIDATION_ERROR(ShapeError);
ROPEKV_VALIDATION_ERROR(RankError);
ROPEKV_VALIDATION_ERROR(InputError);
ROPEKV_VALIDATION_ERROR(SelectionError);
ROPEKV_VALIDATION_ERROR(CacheError);
ROPEKV_VALIDATION_ERROR(BudgetError);
ROPEKV_VALIDATION_ERROR(SizeError);

#undef ROPEKV_VALIDATION_ERROR

class NumericError : public Error {
public:
    NumericError(const std::string& what, double residual)
        : Error(ErrorKind::numeric, what + " (residual " + std::to_string(residual) + ")"),
          residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

inline int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::validation: return 2;
    case ErrorKind::numeric: return 3;
    case ErrorKind::io: return 4;
    }
    return 1;
}

} // namespace ropekv
