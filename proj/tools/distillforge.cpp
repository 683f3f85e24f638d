#include <vector>

#include "distillforge/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return distillforge::cli_main(args);
}
