#include <iostream>

#include "tacood/cli.hpp"

int main(int argc, char** argv) {
  return tacood::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
