#include <iostream>

#include "canf/cli.hpp"

int main(int argc, char** argv) { return canf::dispatch(argc, argv, std::cout, std::cerr); }
