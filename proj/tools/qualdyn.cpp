#include <iostream>

#include "qualdyn/cli.hpp"

int main(int argc, char** argv) {
    return qualdyn::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
