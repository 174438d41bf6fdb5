#include <iostream>

#include "sonofield/cli.hpp"

int main(int argc, char** argv) { return sonofield::run_cli(argc, argv, std::cout, std::cerr); }
