#pragma once

#include <iosfwd>

namespace rcalign::cli {

// Entry point of the rc-align tool. Returns the process exit code:
// 0 success, 2 usage/config, 3 data/format, 4 numeric abort.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rcalign::cli
