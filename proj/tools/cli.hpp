#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gauge::cli {

// Exit statuses.
inline constexpr int kOk = 0;
inline constexpr int kCheckFailed = 1;  // ran fine, but the contract did not hold
inline constexpr int kError = 2;        // usage, I/O, parse or shape error

// Runs one gaugekit command. args[0] is the program name. Data goes to
// `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gauge::cli
