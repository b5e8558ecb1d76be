#pragma once

#include <stdexcept>
#include <string>

namespace macb {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the operation. `where` names the graph node or
// operation that rejected them.
class ShapeError : public Error {
 public:
  ShapeError(std::string where, const std::string& what)
      : Error(where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

// A NaN/Inf appeared, or an iterative routine produced a non-finite value.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace macb
