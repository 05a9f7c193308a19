#include "taco/cli.hpp"

int main(int argc, char** argv) { return taco::cli::run_cli(argc, argv); }
