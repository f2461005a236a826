#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ralnet/eval.hpp"

namespace ralnet::cli {

// Runs one command; args excludes the program name. Returns the process exit
// code. Usage and runtime errors are reported on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// "name: value" lines; per-set values as "per_set[i]: value".
void write_report(std::ostream& out, const EvalReport& report);

}  // namespace ralnet::cli
