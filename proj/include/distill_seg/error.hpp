#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace distill_seg {

// Bad input: shapes, ranges, malformed files, infeasible configuration.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failure while executing a well-formed request (divergence, I/O).
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDiverged : public RuntimeFailure {
 public:
  TrainingDiverged(const std::string& stage, long step)
      : RuntimeFailure(stage + ": loss became non-finite at step " + std::to_string(step)),
        step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail_validation(Args&&... args) {
  throw ValidationError(detail::concat(std::forward<Args>(args)...));
}

template <typename... Args>
[[noreturn]] void fail_runtime(Args&&... args) {
  throw RuntimeFailure(detail::concat(std::forward<Args>(args)...));
}

}  // namespace distill_seg
