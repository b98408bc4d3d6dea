#pragma once

#include <stdexcept>
#include <string>

namespace lomo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand extents do not fit the op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Misuse of the tape: double backward, shared parameters, layer order.
class TapeError : public Error {
 public:
  using Error::Error;
};

// A ledger balance would go negative.
class AccountingError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Loss became NaN/inf in a run that cannot recover from it.
class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

// The loss scaler was asked to drop below its minimum scale.
class ScalerUnderflowError : public Error {
 public:
  using Error::Error;
};

}  // namespace lomo
