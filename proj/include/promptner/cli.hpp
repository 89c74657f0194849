#pragma once

#include <ostream>

namespace promptner::cli {

enum ExitCode : int {
  kOk = 0,
  kUsageError = 1,
  kDataError = 2,
  kBackendExhausted = 3,
};

/// Entry point shared by the `promptner` executable and the in-process tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace promptner::cli
