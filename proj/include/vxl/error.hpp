#pragma once

#include <stdexcept>
#include <string>

namespace vxl {

// Input errors are caller mistakes (bad shapes, bad files, bad config);
// internal errors are numerical failures or broken invariants.
enum class ErrorKind { input, internal };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail_input(const std::string& what) { throw Error(ErrorKind::input, what); }
[[noreturn]] inline void fail_internal(const std::string& what) { throw Error(ErrorKind::internal, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail_input(what);
}

}  // namespace vxl
