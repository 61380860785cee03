#include <iostream>

#include "neuroextract/cli/app.hpp"

int main(int argc, char** argv) { return neuroextract::cli::run(argc, argv, std::cout, std::cerr); }
