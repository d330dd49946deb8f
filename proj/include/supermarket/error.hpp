#ifndef SUPERMARKET_ERROR_HPP
#define SUPERMARKET_ERROR_HPP

#include <stdexcept>
#include <string>

namespace supermarket {

/// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Invalid experiment or simulation configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// The step-size controller collapsed below its floor.
class StiffnessError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Integration hit t_max before the state settled at the origin.
class ConvergenceTimeout : public std::runtime_error {
public:
    ConvergenceTimeout(const std::string& what, double residual)
        : std::runtime_error(what), residual_(residual) {}

    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

}  // namespace supermarket

#endif  // SUPERMARKET_ERROR_HPP
