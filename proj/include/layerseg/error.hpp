#pragma once

#include <stdexcept>
#include <string>

namespace layerseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Iterative solver gave up; carries the last residual.
class ConvergenceError : public NumericalError {
 public:
  ConvergenceError(const std::string& what, double residual, long iterations)
      : NumericalError(what + " (residual " + std::to_string(residual) + " after " +
                       std::to_string(iterations) + " iterations)"),
        residual_(residual),
        iterations_(iterations) {}

  double residual() const noexcept { return residual_; }
  long iterations() const noexcept { return iterations_; }

 private:
  double residual_;
  long iterations_;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// No ordered configuration with positive mass exists for boundary `boundary` of column `column`.
class InfeasibleError : public Error {
 public:
  InfeasibleError(long boundary, long column)
      : Error("infeasible chain: no admissible row for boundary " + std::to_string(boundary) +
              " in column " + std::to_string(column)),
        boundary_(boundary),
        column_(column) {}

  long boundary() const noexcept { return boundary_; }
  long column() const noexcept { return column_; }

 private:
  long boundary_;
  long column_;
};

}  // namespace layerseg
