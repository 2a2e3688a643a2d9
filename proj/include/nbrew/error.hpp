#pragma once

#include <stdexcept>
#include <string>

namespace nbrew {

// Bad or inconsistent configuration (missing slot, budget too small, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied data that violates an operation's precondition.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file content. Carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// API misuse: shape mismatch, backward on a non-scalar, missing gradient.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace nbrew
