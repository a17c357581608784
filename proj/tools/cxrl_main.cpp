#include "cxrl/cli.hpp"

int main(int argc, char** argv) { return cxrl::cli::run_cli(argc, argv); }
