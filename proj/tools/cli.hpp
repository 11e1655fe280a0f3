#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace layerswap::cli {

/// Exit codes: 0 success, 1 usage or contract error, 2 I/O or load error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace layerswap::cli
