#include <iostream>
#include <string>
#include <vector>

#include "maskver/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return maskver::cli::run_cli(args, std::cout, std::cerr);
}
