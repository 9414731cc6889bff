#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aptq {

/// Inconsistent matrix or tensor dimensions.
class shape_error : public std::runtime_error {
public:
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// A symmetric matrix turned out not to be positive definite.
/// Carries the index of the first non-positive Cholesky pivot.
class definiteness_error : public std::runtime_error {
public:
    definiteness_error(const std::string& msg, std::size_t pivot)
        : std::runtime_error(msg), pivot_(pivot) {}
    std::size_t pivot() const { return pivot_; }

private:
    std::size_t pivot_;
};

/// Non-finite values or other numerical breakdown.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument or configuration value.
class value_error : public std::runtime_error {
public:
    explicit value_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// File parsing, checksum, or version failures.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace aptq
