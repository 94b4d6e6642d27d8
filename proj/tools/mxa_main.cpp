#include <iostream>

#include "mxa/cli.hpp"

int main(int argc, char** argv) { return mxa::cli::run(argc, argv, std::cout, std::cerr); }
