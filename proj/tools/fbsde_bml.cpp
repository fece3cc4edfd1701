#include <string>
#include <vector>

#include "fbsde_bml/experiment.hpp"

int main(int argc, char** argv) {
  fbsde::cli::tune_allocator();
  return fbsde::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
