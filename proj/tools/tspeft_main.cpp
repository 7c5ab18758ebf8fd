#include <iostream>

#include "tspeft/cli.hpp"

int main(int argc, char** argv) { return tspeft::run_cli(argc, argv, std::cout, std::cerr); }
