#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace splitstream {

// Shapes that do not chain or do not agree.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument values: labels out of range, budgets out of range, malformed configs.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation called in the wrong lifecycle state (second backward, missing grad).
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Frame truncated or longer than the transport allows.
class FramingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad magic/version, unexpected message, mismatched batch id or gradient shape.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Client and server disagree on the training stage.
class ControlError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

// Connection refused or reset, or the peer went away.
class SessionError : public std::runtime_error {
 public:
  SessionError(const std::string& what, std::int64_t batches_completed = 0)
      : std::runtime_error(what), batches_completed_(batches_completed) {}

  std::int64_t batches_completed() const { return batches_completed_; }

 private:
  std::int64_t batches_completed_;
};

class TimeoutError : public SessionError {
 public:
  using SessionError::SessionError;
};

// On-disk file does not follow its layout (dataset files, checkpoints).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace splitstream
