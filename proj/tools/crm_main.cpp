#include <iostream>
#include <string>
#include <vector>

#include "crm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return crm::run_cli(args, std::cout, std::cerr);
}
