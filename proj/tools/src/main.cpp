#include <iostream>
#include <string>
#include <vector>

#include "unionret/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return unionret::cli::run_command(args, std::cout, std::cerr);
}
