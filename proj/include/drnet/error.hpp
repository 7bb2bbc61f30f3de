#pragma once

#include <stdexcept>
#include <string>

namespace drnet {

// Categories line up with the CLI exit codes (1 usage, 2 data, 3 numerical).
enum class ErrorKind { usage = 1, data = 2, numerical = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& what) {
  throw Error(ErrorKind::usage, what);
}
[[noreturn]] inline void fail_data(const std::string& what) {
  throw Error(ErrorKind::data, what);
}
[[noreturn]] inline void fail_numerical(const std::string& what) {
  throw Error(ErrorKind::numerical, what);
}

}  // namespace drnet
