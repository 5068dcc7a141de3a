#pragma once

#include <stdexcept>
#include <string>

namespace ch4 {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A label sequence admits no CTC alignment in the available frames.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or incompatible file contents.
class FormatError : public Error {
 public:
  FormatError(std::string path, const std::string& what)
      : Error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// A checkpoint does not contain a tensor the model expects.
class MissingTensorError : public FormatError {
 public:
  MissingTensorError(std::string path, std::string name)
      : FormatError(std::move(path), "missing tensor '" + name + "'"), name_(std::move(name)) {}
  const std::string& tensor_name() const { return name_; }

 private:
  std::string name_;
};

}  // namespace ch4
