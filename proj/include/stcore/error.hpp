#pragma once

#include <stdexcept>
#include <string>

namespace stcore {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents, ranks or broadcast rules.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Argument outside its valid domain (even kernel, rate > 1, gamma <= 0 ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Object in the wrong lifecycle state (statistics missing, already fused ...).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed or corrupt file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace stcore
