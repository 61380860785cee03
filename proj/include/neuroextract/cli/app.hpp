#pragma once

#include <iosfwd>

namespace neuroextract::cli {

/// Command-line entry point. Exit status: 0 success, 1 data or
/// configuration error, 2 usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace neuroextract::cli
