#include <string>
#include <vector>

#include "kari/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return kari::cli::run(args);
}
