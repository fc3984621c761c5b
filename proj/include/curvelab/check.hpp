#pragma once

#include <stdexcept>
#include <string>

namespace curvelab {

struct CheckError : std::runtime_error {
  explicit CheckError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace curvelab

#define CVL_CHECK(cond, msg)                                        \
  do {                                                              \
    if (!(cond)) throw ::curvelab::CheckError(std::string(msg));    \
  } while (0)
