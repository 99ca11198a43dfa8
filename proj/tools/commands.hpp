#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace emma::cli {

// Runs one command line. Output goes to `out`; failures are reported on `err`
// as a single line "emma: error[<kind>]: <message>". Returns the exit code:
// 0 success, 1 runtime error, 2 usage error, 3 check failed (gradcheck,
// toy-demo).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace emma::cli
