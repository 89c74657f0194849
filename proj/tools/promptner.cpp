#include "promptner/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return promptner::cli::run(argc, argv, std::cout, std::cerr); }
