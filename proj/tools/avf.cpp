#include <string>
#include <vector>

#include "avf/cli/cli.hpp"

int main(int argc, char** argv) { return avf::cli::run(std::vector<std::string>(argv + 1, argv + argc)); }
