#include <iostream>

#include "featureloop/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return featureloop::run_cli(args, std::cout, std::cerr);
}
