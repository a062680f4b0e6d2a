#pragma once

// Single-binary command line: synth, prepare, train, eval, decode, perturb,
// report, inspect. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical
// abort.

#include <string>
#include <vector>

namespace cloze {

inline constexpr const char* kVersion = "0.1.0";

int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

}  // namespace cloze
