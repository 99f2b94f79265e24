#pragma once

namespace mvar {

// Full command-line front end. Returns the process exit code: 0 success,
// 1 argument/validation error (with usage), 2 runtime failure.
int run_cli(int argc, const char* const* argv);

}  // namespace mvar
