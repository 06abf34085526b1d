#include <iostream>
#include <string>
#include <vector>

#include "klora/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return klora::cli::run(args, std::cout, std::cerr);
}
