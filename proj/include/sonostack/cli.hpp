#pragma once

#include <string>
#include <vector>

namespace sonostack::cli {

// Dispatch one command line. Returns 0 on success, 1 on a domain error
// (message names the failing stage), 2 on a usage error.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

} // namespace sonostack::cli
