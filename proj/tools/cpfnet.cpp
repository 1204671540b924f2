#include <string>
#include <vector>

#include "cpf/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cpf::run_command(args);
}
