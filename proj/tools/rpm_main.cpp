#include <iostream>
#include <string>
#include <vector>

#include "rpm/runner.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) {
    std::cerr << "usage: rpm <run|validate|datagen|selftest> [config] [--seed N] [--out DIR]"
                 " [--iters N]\n";
    return 2;
  }
  return rpm::runner::cli_main(args, std::cout, std::cerr);
}
