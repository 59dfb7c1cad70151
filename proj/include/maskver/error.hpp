#pragma once

#include <stdexcept>
#include <string>

namespace maskver {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller passed a value outside an operation's domain (bad dimension, empty id, degenerate box).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Tensor or kernel shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Malformed text/binary input. `where` names the line, record or file at fault.
class ParseError : public Error {
 public:
  ParseError(const std::string& where, const std::string& what)
      : Error(where + ": " + what), where_(where) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

class VersionError : public Error {
 public:
  using Error::Error;
};

// Model could not be loaded or executed.
class ModelError : public Error {
 public:
  using Error::Error;
};

// Image bytes could not be decoded.
class ImageDecodeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace maskver
