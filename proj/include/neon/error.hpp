#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace neon {

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Bad caller input or configuration. Maps to CLI exit code 1.
class ValidationError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

/// A malformed row in an ingest file. `row` is the 1-based data row index.
class ParseError : public Error {
  public:
    ParseError(std::string file, std::size_t row, const std::string& what)
        : Error(file + ": row " + std::to_string(row) + ": " + what), file_(std::move(file)), row_(row)
    {}

    const std::string& file() const noexcept { return file_; }
    std::size_t row() const noexcept { return row_; }

  private:
    std::string file_;
    std::size_t row_;
};

class GatewayError : public Error {
  public:
    using Error::Error;
};

class ContextOverflow : public GatewayError {
  public:
    ContextOverflow(std::size_t measured, std::size_t budget)
        : GatewayError("context overflow: prompt needs " + std::to_string(measured) +
                       " tokens, budget is " + std::to_string(budget)),
          measured_(measured), budget_(budget)
    {}

    std::size_t measured() const noexcept { return measured_; }
    std::size_t budget() const noexcept { return budget_; }

  private:
    std::size_t measured_;
    std::size_t budget_;
};

/// Connection-level failure. The only error class the gateway retries.
class TransportError : public GatewayError {
  public:
    using GatewayError::GatewayError;
};

/// The backend answered with an error payload.
class BackendError : public GatewayError {
  public:
    BackendError(std::string code, const std::string& message)
        : GatewayError(code + ": " + message), code_(std::move(code))
    {}

    const std::string& code() const noexcept { return code_; }

  private:
    std::string code_;
};

/// An optional capability (classification) is not configured on the backend.
class CapabilityError : public GatewayError {
  public:
    using GatewayError::GatewayError;
};

}  // namespace neon
