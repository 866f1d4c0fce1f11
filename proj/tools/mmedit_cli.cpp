#include "mmedit/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return mmedit::cli_main(argc, argv, std::cout, std::cerr); }
