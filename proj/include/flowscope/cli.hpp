#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowscope::cli {

// Bad flags or parameter values; mapped to exit status 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Overrides the output directory unless --out is given on the command line.
inline constexpr const char* kOutDirEnv = "FLOWSCOPE_OUT";

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace flowscope::cli
