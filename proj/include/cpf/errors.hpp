#pragma once

#include <stdexcept>
#include <string>

namespace cpf {

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised by crop_foreground when a parsing map has no non-background label.
class NoForeground : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Wraps a failure inside one pipeline stage so callers can tell which stage
// rejected its inputs.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

void warn(const std::string& message);

}  // namespace cpf
