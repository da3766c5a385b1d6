#include <iostream>

#include "epk/cli/app.hpp"

int main(int argc, char** argv) { return epk::cli::dispatch(argc, argv, std::cout, std::cerr); }
