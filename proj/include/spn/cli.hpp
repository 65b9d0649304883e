#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace spn {

// Entry point of the `spn` tool; returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Invariant suite behind `spn verify`: one "PASS|FAIL <name>" line per check.
// Returns true if everything passed.
bool run_verify(std::ostream& out);

}  // namespace spn
