#pragma once

#include <stdexcept>
#include <string>

namespace wavetag {

// Root of every error thrown by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

enum class DecodeErrorKind { malformed_header, unsupported_codec, empty_data };

class DecodeError : public Error {
 public:
  DecodeError(DecodeErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  DecodeErrorKind kind() const noexcept { return kind_; }

 private:
  DecodeErrorKind kind_;
};

enum class ManifestErrorKind { parse, unknown_label, duplicate_id, empty_labels, vocabulary };

class ManifestError : public Error {
 public:
  ManifestError(ManifestErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  ManifestErrorKind kind() const noexcept { return kind_; }

 private:
  ManifestErrorKind kind_;
};

enum class CheckpointErrorKind { corrupt_header, shape_mismatch, version_mismatch, config_mismatch };

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what) : Error(what), kind_(kind) {}
  CheckpointErrorKind kind() const noexcept { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

}  // namespace wavetag
