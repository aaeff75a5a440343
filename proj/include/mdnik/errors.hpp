#pragma once

#include <stdexcept>
#include <string>

namespace mdnik {

// Every failure raised by the library derives from Error so callers (the CLI in
// particular) can tell validation problems apart from runtime failures.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Bad input: malformed files, inconsistent dimensions, out-of-range values.
class ValidationError : public Error {
  public:
    using Error::Error;
};

class ParseError : public ValidationError {
  public:
    ParseError(const std::string& what, int line)
        : ValidationError(line > 0 ? what + " (line " + std::to_string(line) + ")" : what),
          line_(line) {}
    explicit ParseError(const std::string& what) : ValidationError(what), line_(0) {}

    int line() const noexcept { return line_; }

  private:
    int line_;
};

class DimensionError : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

class TopologyError : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

class DomainError : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

class RangeError : public ValidationError {
  public:
    RangeError(const std::string& what, std::size_t joint) : ValidationError(what), joint_(joint) {}
    std::size_t joint() const noexcept { return joint_; }

  private:
    std::size_t joint_;
};

// Runtime failures that are not the caller's fault.
class DivergenceError : public Error {
  public:
    DivergenceError(const std::string& what, int epoch, int batch)
        : Error(what + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ")"),
          epoch_(epoch), batch_(batch) {}
    int epoch() const noexcept { return epoch_; }
    int batch() const noexcept { return batch_; }

  private:
    int epoch_;
    int batch_;
};

class GeometryError : public Error {
  public:
    using Error::Error;
};

}  // namespace mdnik
