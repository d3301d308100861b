#pragma once

#include <stdexcept>
#include <string>

namespace ladmim {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

// A forward op produced NaN or Inf, or a loss diverged during training.
struct NonFiniteError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

// A pipeline stage ran before the artifact it depends on exists.
struct MissingPrerequisite : Error {
  using Error::Error;
};

}  // namespace ladmim
