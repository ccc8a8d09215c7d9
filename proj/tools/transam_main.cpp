#include <iostream>

#include "transam/cli.hpp"

int main(int argc, char** argv) { return transam::cli::run_cli(argc, argv, std::cout, std::cerr); }
