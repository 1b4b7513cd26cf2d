#include <string>
#include <vector>

#include "phenomil/cli/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return phenomil::cli::run(args);
}
