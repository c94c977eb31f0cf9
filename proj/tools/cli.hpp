#pragma once

#include <ostream>

namespace cnerf {

/// Entry point of the command-line tool. Returns 0 on success, 1 on a usage
/// error (usage text on `err`) and 2 on a runtime failure (message on `err`).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cnerf
