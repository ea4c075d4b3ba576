#include <string>
#include <vector>

#include "ddt/cli.hpp"

int main(int argc, char** argv) {
    return ddt::cli::dispatch(std::vector<std::string>(argv, argv + argc));
}
