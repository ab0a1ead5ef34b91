#include <iostream>

#include "dtrattunet/cli.hpp"

int main(int argc, char** argv) { return dtrattunet::run_cli(argc, argv, std::cout, std::cerr); }
