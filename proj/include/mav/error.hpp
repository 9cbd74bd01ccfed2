#pragma once

#include <stdexcept>
#include <string>

namespace mav {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes are inconsistent; message names the offending shapes.
struct ShapeError : Error {
  using Error::Error;
};

// A parameter is out of its documented range.
struct ValueError : Error {
  using Error::Error;
};

// File or format problem; message carries path and offset/line where known.
struct IoError : Error {
  using Error::Error;
};

// NaN or Inf encountered where finite values are required.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace mav
