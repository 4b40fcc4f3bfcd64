#include <iostream>

#include "flowscope/cli.hpp"

int main(int argc, char** argv) { return flowscope::cli::run(argc, argv, std::cout, std::cerr); }
