#include <iostream>

#include "fundusq/cli.hpp"

int main(int argc, char** argv) { return fundusq::cli::run(argc, argv, std::cout, std::cerr); }
