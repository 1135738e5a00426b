#pragma once

#include <stdexcept>
#include <string>

namespace astseg {

// Thrown when an operation's documented preconditions are violated
// (shape mismatches, out-of-range arguments, invalid tensor contents).
class contract_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown for malformed or inconsistent run configuration. The CLI maps
// this to exit code 2.
class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown for file system / serialization failures. Exit code 1.
class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw contract_error(msg);
}

inline void check_config(bool cond, const std::string& msg) {
  if (!cond) throw config_error(msg);
}

inline void check_io(bool cond, const std::string& msg) {
  if (!cond) throw io_error(msg);
}

}  // namespace astseg
