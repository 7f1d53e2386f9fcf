#pragma once

#include <iosfwd>

namespace hivest::cli {

// Exit codes: 0 success, 2 configuration/usage, 3 data validation,
// 4 numerical failure.
enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4 };

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hivest::cli
