#ifndef TOXLENS_ERROR_HPP_
#define TOXLENS_ERROR_HPP_

#include <stdexcept>
#include <string>
#include <utility>

namespace toxlens {

// Error categories map onto process exit codes: validation -> 2,
// numeric -> 3, io -> 4 (0 is success).
enum class ErrorKind { Validation, Numeric, Io };

inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Validation: return 2;
    case ErrorKind::Numeric: return 3;
    case ErrorKind::Io: return 4;
  }
  return 2;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message), kind_(kind), code_(std::move(code)) {}

  ErrorKind kind() const { return kind_; }
  const std::string& code() const { return code_; }

  static Error validation(std::string code, const std::string& message) {
    return Error(ErrorKind::Validation, std::move(code), message);
  }
  static Error numeric(std::string code, const std::string& message) {
    return Error(ErrorKind::Numeric, std::move(code), message);
  }
  static Error io(std::string code, const std::string& message) {
    return Error(ErrorKind::Io, std::move(code), message);
  }

 private:
  ErrorKind kind_;
  std::string code_;
};

}  // namespace toxlens

#endif  // TOXLENS_ERROR_HPP_
