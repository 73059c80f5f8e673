#pragma once

#include <stdexcept>
#include <string>

namespace step {

// All library failures surface as this exception; `what()` is a single line.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace step
