#include <iostream>

#include "mfbn/cli.hpp"

int main(int argc, char** argv) {
  return mfbn::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
