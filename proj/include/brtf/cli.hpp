#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace brtf {

/// Entry point of the `brtf` tool: subcommands simulate, fit, predict, eval.
/// Exit codes: 0 success (fit: converged), 2 fit stopped at max-iters,
/// 1 usage / I/O / numerical error.
int cli_main(int argc, char** argv);

/// Same, with the program name omitted from `args` and explicit streams.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace brtf
