#pragma once

#include <stdexcept>
#include <string>

namespace promptner {

/// Malformed or inconsistent input data (bad records, missing artifacts).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace promptner
