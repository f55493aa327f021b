#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace volflow {

// Error taxonomy mirrored by the C API status codes and the CLI exit codes:
// contract violations -> 1, I/O failures -> 2, verification failures -> 3.
enum class ErrorKind : int { contract = 1, io = 2, verification = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error(ErrorKind::contract, msg) {}
};

// A NaN/Inf surfaced by the numeric engine. Contract-class: it must never
// propagate silently.
struct NonFiniteError : ContractError {
  explicit NonFiniteError(const std::string& msg) : ContractError(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(ErrorKind::io, msg) {}
};

struct VerifyError : Error {
  explicit VerifyError(const std::string& msg) : Error(ErrorKind::verification, msg) {}
};

template <class... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

enum class Precision { f32, f64 };

inline const char* precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

}  // namespace volflow
