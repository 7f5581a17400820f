#include <string>
#include <vector>

#include "mbsde/cli/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mbsde::cli::run(args);
}
