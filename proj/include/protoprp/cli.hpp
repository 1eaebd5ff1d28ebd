#pragma once

#include "protoprp/config.hpp"

#include <string>
#include <vector>

namespace protoprp {

// Parses `proto-prp <command> --config <file|preset> [--key=value ...]`,
// runs the command and maps errors to exit codes: 0 ok, 2 config,
// 3 numeric, 4 I/O.
int run_cli(int argc, const char* const* argv);

// The individual commands, also callable from tests. Each returns the files
// it wrote (run.json excluded; run_cli appends that record itself).
std::vector<std::string> cmd_gen_data(const RunConfig& config);
std::vector<std::string> cmd_train(const RunConfig& config);
std::vector<std::string> cmd_explain(const RunConfig& config);
std::vector<std::string> cmd_eval(const RunConfig& config);
std::vector<std::string> cmd_cluster(const RunConfig& config);

} // namespace protoprp
