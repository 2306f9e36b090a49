#pragma once

#include <ostream>

namespace rdg {

// `rdg train|infer|bench|gen-data ...`. Returns 0 on success, 1 on runtime failure, 2 on usage errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace rdg
