// SPDX-License-Identifier: Apache-2.0
//
// Exception hierarchy shared by every module. The CLI maps the kind of a
// caught error onto its exit-code table.

#pragma once

#include <stdexcept>
#include <string>

namespace cprobe {

enum class ErrorKind {
  format,      // wrong magic or unsupported version
  corrupt,     // header/size mismatch in a binary file
  validation,  // value violates a documented invariant
  parse,       // malformed text input (JSONL, CSV, JSON)
  domain,      // argument outside the valid domain of an operation
  io,          // filesystem failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};

class CorruptFileError : public Error {
 public:
  explicit CorruptFileError(const std::string& what) : Error(ErrorKind::corrupt, what) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(ErrorKind::validation, what) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(ErrorKind::parse, what) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what) : Error(ErrorKind::domain, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

const char* to_string(ErrorKind kind) noexcept;

}  // namespace cprobe
