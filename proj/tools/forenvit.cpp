#include <iostream>

#include "forenvit/cli/commands.hpp"

int main(int argc, char** argv) { return forenvit::cli::run(argc, argv, std::cout, std::cerr); }
