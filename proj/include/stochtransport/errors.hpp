#pragma once

#include <stdexcept>
#include <string>

namespace stochtransport {

/// Argument outside the mathematical domain of an operation (negative time,
/// inverted interval, H outside (0,1), ...).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Request outside the range covered by tabulated or sampled data.
class RangeError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Numerical failure: non-positive-definite covariance, imaginary residue
/// above tolerance, CFL violation, ...
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration (bad or missing field). `path` names the field.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

}  // namespace stochtransport
