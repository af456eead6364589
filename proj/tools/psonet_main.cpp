#include "psonet/cli.hpp"

int main(int argc, char** argv) { return psonet::cli::run_cli(argc, argv); }
