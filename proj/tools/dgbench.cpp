#include <iostream>

#include "dgbench/cli.hpp"

int main(int argc, char** argv) {
  return dgb::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
