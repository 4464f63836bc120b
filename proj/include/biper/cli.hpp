#pragma once

// Command-line front end. Subcommands: analyze-qe, plot-pdf, train, eval,
// ablate-omega, pack, bench. Each prints a one-line JSON summary on stdout;
// failures print one `error: ...` line on stderr and return nonzero
// (2 for usage errors, 1 otherwise).

#include <iosfwd>
#include <string>
#include <vector>

namespace biper::cli {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace biper::cli
