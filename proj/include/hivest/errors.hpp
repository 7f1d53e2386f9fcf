#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace hivest {

// Base of every error raised by the library. The CLI maps the subclasses onto
// exit codes: ConfigError -> 2, DataError -> 3, NumericalError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Argument outside the domain of a function (time outside a spline domain,
// non-finite state components).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Inconsistent settings (spline order vs control count, bad optimizer sizes).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data that fails validation (non-monotone times, log of nonpositive).
class DataError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class IntegrationBlowup : public NumericalError {
 public:
  IntegrationBlowup(double time, const std::string& what)
      : NumericalError(what), time_(time) {}
  double time() const { return time_; }

 private:
  double time_;
};

// Local design matrix singular at one or more evaluation points.
class SingularDesign : public NumericalError {
 public:
  SingularDesign(std::vector<double> times, const std::string& what)
      : NumericalError(what), times_(std::move(times)) {}
  const std::vector<double>& times() const { return times_; }

 private:
  std::vector<double> times_;
};

// Rank-deficient regression or failed fit.
class EstimationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace hivest
