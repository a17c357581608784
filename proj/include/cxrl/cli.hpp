#pragma once

// Command-line front end. Exit codes: 0 success, 2 configuration error
// (bad flags, unknown keys, invalid values, incompatible artifacts),
// 3 I/O or checkpoint error, 4 training/evaluation divergence.

namespace cxrl::cli {

int run_cli(int argc, char** argv);

}  // namespace cxrl::cli
