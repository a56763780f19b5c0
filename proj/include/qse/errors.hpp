#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace qse {

// All library failures carry a stable kind tag; the CLI reports them as
// single "error: <kind>: <detail>" lines.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& detail)
      : std::runtime_error(kind + ": " + detail), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& d) : Error("shape-error", d) {}
};
struct LengthError : Error {
  explicit LengthError(const std::string& d) : Error("length-error", d) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& d) : Error("format-error", d) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& d) : Error("config-error", d) {}
};
struct DataError : Error {
  explicit DataError(const std::string& d) : Error("data-error", d) {}
};
struct ContractViolation : Error {
  explicit ContractViolation(const std::string& d) : Error("contract-violation", d) {}
};
struct NonFiniteError : Error {
  explicit NonFiniteError(const std::string& d) : Error("non-finite", d) {}
};

}  // namespace qse
