#pragma once

#include <string>
#include <vector>

namespace sundial {

// Entry point behind the binary: args exclude the program name.
// Returns 0 on success, 1 on runtime failure, 2 on usage errors.
int cli_main(const std::vector<std::string>& args);

}  // namespace sundial
