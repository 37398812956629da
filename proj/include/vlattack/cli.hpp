#ifndef VLATTACK_CLI_HPP
#define VLATTACK_CLI_HPP

#include <string>
#include <vector>

namespace vlat {

// Entry point behind the command-line binary; args exclude the program
// name. Returns the process exit code: 0 success, 2 configuration or
// input error, 3 numeric failure.
int cli_main(const std::vector<std::string>& args);

}  // namespace vlat

#endif  // VLATTACK_CLI_HPP
