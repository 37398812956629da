#include "vlattack/cli.hpp"

int main(int argc, char** argv) {
  return vlat::cli_main(std::vector<std::string>(argv + 1, argv + argc));
}
