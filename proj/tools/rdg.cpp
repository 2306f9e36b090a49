#include <iostream>

#include "rdg/cli.hpp"

int main(int argc, char** argv) { return rdg::run_cli(argc, argv, std::cout, std::cerr); }
