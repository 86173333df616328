#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace qualdyn {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A precondition on the arguments was violated (bad step size, shape mismatch, ...).
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// The model produced a non-finite value. Carries the offending state and time.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, Eigen::VectorXd state, double time = 0.0)
        : Error(what), state_(std::move(state)), time_(time) {}

    const Eigen::VectorXd& state() const noexcept { return state_; }
    double time() const noexcept { return time_; }

private:
    Eigen::VectorXd state_;
    double time_;
};

/// Adaptive step size collapsed below the representable minimum.
class StiffnessError : public Error {
public:
    StiffnessError(const std::string& what, double time) : Error(what), time_(time) {}
    double time() const noexcept { return time_; }

private:
    double time_;
};

class DegenerateFrameError : public Error {
public:
    using Error::Error;
};

class UnboundedDimensionError : public Error {
public:
    using Error::Error;
};

/// Covariance could not be factorized even after jitter escalation.
class CovarianceError : public Error {
public:
    using Error::Error;
};

class ObservationError : public Error {
public:
    using Error::Error;
};

/// The filter spent too many consecutive iterations with every sigma point diverging.
class RegimeLostError : public Error {
public:
    using Error::Error;
};

/// Lookup of an unknown model, sampler, or similar named entity.
class LookupError : public Error {
public:
    using Error::Error;
};

/// Parse failure in the model description language, with 1-based source location.
class ParseError : public Error {
public:
    ParseError(const std::string& message, int line, int column)
        : Error("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + message),
          message_(message),
          line_(line),
          column_(column) {}

    const std::string& message() const noexcept { return message_; }
    int line() const noexcept { return line_; }
    int column() const noexcept { return column_; }

private:
    std::string message_;
    int line_;
    int column_;
};

}  // namespace qualdyn
