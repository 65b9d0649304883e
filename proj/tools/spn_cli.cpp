#include <iostream>

#include "spn/cli.hpp"

int main(int argc, char** argv) {
  return spn::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
