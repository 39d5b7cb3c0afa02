#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pfq::cli {

// Runs one command line. Returns the process exit code; failures print a
// single "error: <code>: <message>" line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pfq::cli
