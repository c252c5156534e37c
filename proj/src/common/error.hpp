#pragma once

#include <stdexcept>
#include <string>

namespace xnn {

// Error codes shared between the C++ core and the C API / CLI exit codes.
enum class ErrorCode : int {
  Ok = 0,
  Runtime = 1,
  InvalidArgument = 2,
  Shape = 3,
  Numeric = 4,
  Parse = 5,
  Io = 6,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

class InvalidArgumentError : public Error {
 public:
  explicit InvalidArgumentError(const std::string& msg)
      : Error(ErrorCode::InvalidArgument, msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(ErrorCode::Shape, msg) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg)
      : Error(ErrorCode::Numeric, msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(ErrorCode::Io, msg) {}
};

// File-format failures keep a kind so callers can distinguish a bad magic
// from a checksum mismatch or a truncated stream.
class ParseError : public Error {
 public:
  enum class Kind { BadMagic, BadVersion, BadCrc, Truncated, Invariant, Malformed };

  ParseError(Kind kind, const std::string& msg)
      : Error(ErrorCode::Parse, msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace xnn
