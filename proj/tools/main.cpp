#include <iostream>

#include "stcore/cli.hpp"

int main(int argc, char** argv) { return stcore::cli::run(argc, argv, std::cout, std::cerr); }
